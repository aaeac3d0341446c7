"""GAN-based blackbox attack on clustering models.

A generator ``G`` maps each image to a bounded perturbation ``delta``; a
discriminator ``D`` tries to tell clean images from perturbed ones. Training
solves::

    max_D min_G  L - alpha_a * L_attack - alpha_c * L_constraint

where ``L`` is the minimax GAN loss, ``L_attack`` the mean distance between
clean and perturbed membership rows, and ``L_constraint`` the (non-positive)
hinge on the perturbation norm budget ``epsilon``. Every call to the victim's
``query`` during training is recorded in a :class:`QueryLedger`; generation
after training issues no queries at all.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .clustering import ClusterModel, _pixels, predict_labels
from .data import ImageBatch, as_unlabeled, batches
from .errors import ConfigValidationError, InvalidParameterError, ShapeMismatchError
from .metrics import MetricsReport, report

log = logging.getLogger(__name__)

GAN_EPS = 1e-7
GENERATOR_SCHEMA_VERSION = 1


def attack_loss(m_pre: torch.Tensor, m_post: torch.Tensor) -> torch.Tensor:
    if m_pre.shape != m_post.shape:
        raise ShapeMismatchError(f"membership shapes differ: {tuple(m_pre.shape)} vs {tuple(m_post.shape)}")
    return _row_distance(m_pre, m_post).mean()


def _row_distance(a, b):
    return torch.linalg.vector_norm((a - b).reshape(-1, a.shape[-1]), dim=1)


def perturbation_norms(delta: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(delta.flatten(1), dim=1)


def constraint_loss(delta: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Mean of ``min(epsilon - ||delta_i||, 0)``; zero iff every sample is within budget."""
    if not epsilon > 0:
        raise InvalidParameterError("epsilon must be > 0")
    return torch.clamp(epsilon - perturbation_norms(delta), max=0.0).mean()


def gan_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    d_real = d_real.clamp(GAN_EPS, 1 - GAN_EPS)
    d_fake = d_fake.clamp(GAN_EPS, 1 - GAN_EPS)
    return (torch.log(d_real) + torch.log(1 - d_fake)).mean()


def one_hot_target(target: int, k: int, like: torch.Tensor | None = None) -> torch.Tensor:
    if not (isinstance(target, (int, np.integer)) and 0 <= target < k):
        raise InvalidParameterError(f"target must be a cluster index in [0, {k})")
    vec = torch.zeros(k, dtype=like.dtype if like is not None else torch.float32)
    vec[target] = 1.0
    return vec


def targeted_objective(m_target: torch.Tensor, m_post: torch.Tensor) -> torch.Tensor:
    """Mean distance from post-attack rows to a one-hot target (to be minimized)."""
    m_target = torch.as_tensor(m_target, dtype=m_post.dtype)
    if m_target.dim() != 1 or m_target.shape[0] != m_post.shape[-1]:
        raise InvalidParameterError("target must be a vector with one entry per cluster")
    if not (torch.isin(m_target, torch.tensor([0.0, 1.0], dtype=m_target.dtype)).all()
            and m_target.sum() == 1):
        raise InvalidParameterError("target must be one-hot")
    return _row_distance(m_target.expand_as(m_post), m_post).mean()


class PerturbationGenerator(nn.Module):
    """Encoder-decoder producing a same-shape perturbation bounded by ``scale`` per pixel."""

    def __init__(self, c: int, scale: float, width: int = 16):
        super().__init__()
        self.scale = float(scale)
        self.net = nn.Sequential(
            nn.Conv2d(c, width, 3, 1, 1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, 2, 1), nn.ReLU(),
            nn.ConvTranspose2d(2 * width, width, 4, 2, 1), nn.ReLU(),
            nn.Conv2d(width, c, 3, 1, 1),
        )

    def forward(self, x):
        out = self.net(x)
        if out.shape[-2:] != x.shape[-2:]:
            out = F.interpolate(out, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return self.scale * torch.tanh(out)


class Discriminator(nn.Module):
    def __init__(self, c: int, h: int, w: int, width: int = 16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(c, width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Flatten(),
        )
        with torch.no_grad():
            flat = self.features(torch.zeros(1, c, h, w)).shape[1]
        self.head = nn.Linear(flat, 1)

    def forward(self, x):
        return torch.sigmoid(self.head(self.features(x))).squeeze(1)


@dataclass
class AttackConfig:
    epsilon: float = 0.5
    alpha_a: float = 20.0
    alpha_c: float = 100.0
    batch_size: int = 64
    max_batches: int = 600
    min_batches: int = 200
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    window: int = 20
    tau: float = 1e-3
    seed: int = 0
    target: int | None = None
    cache_clean: bool = True
    width: int = 16

    def validate(self, k: int | None = None) -> "AttackConfig":
        for name in ("epsilon", "alpha_a", "alpha_c", "lr_g", "lr_d", "tau"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and value > 0 and math.isfinite(value)):
                raise ConfigValidationError(name, f"must be a positive number, got {value!r}")
        for name in ("batch_size", "max_batches", "window", "width"):
            if not (isinstance(getattr(self, name), int) and getattr(self, name) >= 1):
                raise ConfigValidationError(name, "must be a positive integer")
        if not (isinstance(self.min_batches, int) and self.min_batches >= 0):
            raise ConfigValidationError("min_batches", "must be a non-negative integer")
        if self.target is not None:
            if not isinstance(self.target, int) or self.target < 0 or (k is not None and self.target >= k):
                raise ConfigValidationError("target", f"must be a cluster index in [0, {k})")
        return self

    @classmethod
    def from_dict(cls, values: dict) -> "AttackConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass
class QueryLedger:
    batch_size: int
    batch_queries: int = 0
    training_batches: int = 0
    cache_hits: int = 0
    converged: bool = False
    frozen: bool = False

    def record(self, n: int = 1) -> None:
        if self.frozen:
            raise RuntimeError("ledger is frozen")
        self.batch_queries += n

    def freeze(self) -> "QueryLedger":
        self.frozen = True
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AdversarialBatch(ImageBatch):
    delta_norms: torch.Tensor = field(default=None)


class TrainedGenerator:
    """A frozen perturbation generator together with the config that produced it."""

    def __init__(self, network: PerturbationGenerator, config: AttackConfig,
                 input_shape, history: list[float] | None = None):
        self.network = network.eval().requires_grad_(False)
        self.config = config
        self.input_shape = tuple(input_shape)
        self.history = list(history or [])

    def delta(self, pixels: torch.Tensor) -> torch.Tensor:
        if tuple(pixels.shape[1:]) != self.input_shape:
            raise ShapeMismatchError(f"generator expects {self.input_shape} images, got {tuple(pixels.shape[1:])}")
        with torch.no_grad():
            return self.network(pixels)

    def state(self) -> dict:
        return {"schema_version": GENERATOR_SCHEMA_VERSION, "config": asdict(self.config),
                "input_shape": list(self.input_shape), "network": self.network.state_dict()}

    def save(self, path) -> None:
        torch.save(self.state(), path)

    @classmethod
    def load(cls, path) -> "TrainedGenerator":
        state = torch.load(path, weights_only=False)
        if state.get("schema_version") != GENERATOR_SCHEMA_VERSION:
            raise InvalidParameterError(f"{path}: unsupported generator schema")
        config = AttackConfig(**state["config"])
        shape = tuple(state["input_shape"])
        net = PerturbationGenerator(shape[0], _pixel_scale(config.epsilon, shape), config.width)
        net.load_state_dict(state["network"])
        return cls(net, config, shape)


class ZeroGenerator:
    """Identity attack: always returns a zero perturbation."""

    def __init__(self, input_shape):
        self.input_shape = tuple(input_shape)

    def delta(self, pixels):
        return torch.zeros_like(pixels)


def _pixel_scale(epsilon: float, shape) -> float:
    return 3.0 * epsilon / math.sqrt(float(np.prod(shape)))


def generate_adversarial(g, batch) -> AdversarialBatch:
    """Return ``clip(x + G(x), 0, 1)`` without querying any victim."""
    pixels = _pixels(batch)
    ids = batch.ids if isinstance(batch, ImageBatch) else torch.arange(pixels.shape[0])
    delta = g.delta(pixels)
    adv = torch.clamp(pixels + delta, 0.0, 1.0)
    return AdversarialBatch(adv, ids, perturbation_norms(delta))


def perturb_images(g, images: torch.Tensor, batch_size: int = 256) -> tuple[torch.Tensor, torch.Tensor]:
    """Adversarial versions of a whole image tensor plus pre-clip perturbation norms."""
    advs, norms = [], []
    for start in range(0, images.shape[0], batch_size):
        out = generate_adversarial(g, images[start:start + batch_size])
        advs.append(out.pixels)
        norms.append(out.delta_norms)
    return torch.cat(advs), torch.cat(norms)


def generator_objective(generator: nn.Module, discriminator: nn.Module, victim: ClusterModel,
                        x: torch.Tensor, m_ref: torch.Tensor, config: AttackConfig,
                        targeted: bool = False) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Combined objective minimized by the generator for one batch.

    Returns ``(objective, delta, m_post)``. Issues exactly one victim query.
    In targeted mode ``m_ref`` is the one-hot target and the distance to it
    is minimized instead of maximized.
    """
    delta = generator(x)
    x_adv = torch.clamp(x + delta, 0.0, 1.0)
    m_post = victim.query(x_adv)
    gan = gan_loss(discriminator(x), discriminator(x_adv))
    if targeted:
        attack_term = -targeted_objective(m_ref, m_post)
    else:
        attack_term = attack_loss(m_ref, m_post)
    objective = gan - config.alpha_a * attack_term - config.alpha_c * constraint_loss(delta, config.epsilon)
    return objective, delta, m_post


def _converged(history: list[float], window: int, tau: float) -> bool:
    if len(history) < 2 * window:
        return False
    recent = float(np.mean(history[-window:]))
    previous = float(np.mean(history[-2 * window:-window]))
    return abs(recent - previous) / max(abs(previous), 1e-12) < tau


def train_attack(victim: ClusterModel, dataset, config: AttackConfig | None = None
                 ) -> tuple[TrainedGenerator, QueryLedger]:
    """Train the perturbation generator against a frozen victim.

    Per batch: one query for clean memberships (skipped when every sample is
    already cached, and in targeted mode), one D ascent step, then one G
    descent step whose objective issues the perturbed-batch query.
    """
    cfg = (config or AttackConfig()).validate(victim.k)
    images = as_unlabeled(dataset).images
    n, c, h, w = images.shape
    if (c, h, w) != tuple(victim.input_shape):
        raise ShapeMismatchError("dataset images do not match the victim's input shape")
    bs = min(cfg.batch_size, n)
    torch.manual_seed(cfg.seed)
    generator = PerturbationGenerator(c, _pixel_scale(cfg.epsilon, (c, h, w)), cfg.width)
    discriminator = Discriminator(c, h, w, cfg.width)
    opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.lr_g, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=cfg.lr_d, betas=(0.5, 0.999))

    targeted = cfg.target is not None
    ledger = QueryLedger(batch_size=bs)
    cache = torch.zeros(n, victim.k)
    cached = torch.zeros(n, dtype=torch.bool)
    history: list[float] = []
    epoch = 0
    done = False
    while not done:
        for batch in batches(images, bs, shuffle=True, seed=cfg.seed * 100003 + epoch):
            x, ids = batch.pixels, batch.ids
            if targeted:
                m_ref = one_hot_target(cfg.target, victim.k)
            else:
                missing = ids[~cached[ids]] if cfg.cache_clean else ids
                if len(missing):
                    with torch.no_grad():
                        cache[missing] = victim.query(images[missing])
                    ledger.record()
                    if cfg.cache_clean:
                        cached[missing] = True
                else:
                    ledger.cache_hits += 1
                m_ref = cache[ids]

            with torch.no_grad():
                x_fake = torch.clamp(x + generator(x), 0.0, 1.0)
            d_loss = -gan_loss(discriminator(x), discriminator(x_fake))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            objective, _, _ = generator_objective(generator, discriminator, victim, x, m_ref, cfg, targeted)
            ledger.record()
            opt_g.zero_grad()
            objective.backward()
            opt_g.step()

            history.append(objective.item())
            ledger.training_batches += 1
            if ledger.training_batches >= cfg.min_batches and _converged(history, cfg.window, cfg.tau):
                ledger.converged = True
                done = True
            if ledger.training_batches >= cfg.max_batches:
                done = True
            if done:
                break
        epoch += 1

    if not ledger.converged:
        log.warning("attack stopped at max_batches=%d without meeting tau=%g", cfg.max_batches, cfg.tau)
    return TrainedGenerator(generator, copy.deepcopy(cfg), (c, h, w), history), ledger.freeze()


def evaluate(model: ClusterModel, images: torch.Tensor, labels, batch_size: int = 256) -> MetricsReport:
    return report(predict_labels(model, images, batch_size), labels)


@dataclass
class SweepPoint:
    epsilon: float
    mean_norm: float
    max_norm: float
    report: MetricsReport
    ledger: QueryLedger


def epsilon_sweep(victim: ClusterModel, dataset, base_config: AttackConfig, epsilons,
                  eval_set=None) -> list[SweepPoint]:
    """Run one full attack per budget and score each on ``eval_set`` (default ``dataset``)."""
    epsilons = [float(e) for e in epsilons]
    if any(b < a for a, b in zip(epsilons, epsilons[1:])):
        raise InvalidParameterError("epsilons must be ascending")
    eval_set = eval_set if eval_set is not None else dataset
    points = []
    for eps in epsilons:
        cfg = copy.deepcopy(base_config)
        cfg.epsilon = eps
        g, ledger = train_attack(victim, dataset, cfg)
        adv, norms = perturb_images(g, eval_set.images)
        points.append(SweepPoint(eps, float(norms.mean()), float(norms.max()),
                                 evaluate(victim, adv, eval_set.labels), ledger))
    return points
