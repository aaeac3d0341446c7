"""Victim clustering models behind a query-only interface.

Every model maps an image batch to a row-stochastic soft-membership matrix
``M`` of shape ``(b, k)``. Each call to :meth:`ClusterModel.query` counts as
one batch query. Gradients may flow from the returned memberships back to the
input pixels, but model parameters are frozen and never exposed.
"""

from __future__ import annotations

import copy
import threading
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.cluster import KMeans
from torch import nn

from .data import ImageBatch, as_unlabeled, check_pixel_range, illumination_field
from .errors import DegenerateClusteringError, InvalidParameterError, ShapeMismatchError

CHECKPOINT_SCHEMA_VERSION = 1


def _pixels(batch) -> torch.Tensor:
    return batch.pixels if isinstance(batch, ImageBatch) else batch


def hard_labels(m) -> np.ndarray:
    """Per-row argmax of a membership matrix; ties go to the lowest cluster index."""
    if isinstance(m, torch.Tensor):
        m = m.detach().cpu().numpy()
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeMismatchError("membership matrix must be 2-D")
    return np.argmax(m, axis=1)  # numpy returns the first maximal index


class ClusterModel:
    """Base class for frozen victims. Subclasses implement ``_memberships``."""

    k: int
    input_shape: tuple[int, int, int]

    def __init__(self):
        self._query_count = 0
        self._counter_lock = threading.Lock()

    @property
    def query_count(self) -> int:
        return self._query_count

    def query(self, batch) -> torch.Tensor:
        pixels = _pixels(batch)
        if pixels.dim() != 4 or tuple(pixels.shape[1:]) != tuple(self.input_shape):
            raise ShapeMismatchError(
                f"model expects (b, {', '.join(map(str, self.input_shape))}) input, "
                f"got {tuple(pixels.shape)}")
        check_pixel_range(pixels.detach())
        with self._counter_lock:
            self._query_count += 1
        return self._memberships(pixels)

    def _memberships(self, pixels: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def embed(self, pixels: torch.Tensor) -> torch.Tensor:
        """Owner-side feature access (not a victim query)."""
        raise NotImplementedError

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_counter_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._counter_lock = threading.Lock()


class LabelOnlyModel:
    """Decision-based view of a model: exposes hard labels and nothing else."""

    def __init__(self, inner: ClusterModel):
        self._inner = inner

    @property
    def k(self) -> int:
        return self._inner.k

    def labels(self, batch) -> np.ndarray:
        with torch.no_grad():
            return hard_labels(self._inner.query(batch))


def _soft_assign(z: torch.Tensor, centroids: torch.Tensor, temperature: float) -> torch.Tensor:
    d2 = ((z[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    return torch.softmax(-d2 / temperature, dim=1)


class IlluminationNormalize(nn.Module):
    """Subtract each channel's least-squares planar fit ``a0 + a1 * u + a2 * v``."""

    def __init__(self, h: int, w: int):
        super().__init__()
        planes = illumination_field(torch.eye(3, dtype=torch.float64), h, w).reshape(3, -1).T
        q, _ = torch.linalg.qr(planes)
        self.register_buffer("basis", q.float())

    def forward(self, x):
        flat = x.flatten(2)
        return (flat - (flat @ self.basis) @ self.basis.T).view_as(x)


class ConvEncoder(nn.Module):
    def __init__(self, c: int, h: int, w: int, embed_dim: int):
        super().__init__()
        self.normalize = IlluminationNormalize(h, w)
        self.features = nn.Sequential(
            nn.Conv2d(c, 16, 3, 1, 1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(32, 32, 3, 2, 1), nn.ReLU(),
            nn.Flatten(),
        )
        with torch.no_grad():
            flat = self.features(torch.zeros(1, c, h, w)).shape[1]
        self.head = nn.Linear(flat, embed_dim)

    def forward(self, x):
        return F.normalize(self.head(self.features(self.normalize(x))), dim=1)


class ConvDecoder(nn.Module):
    def __init__(self, c: int, h: int, w: int, embed_dim: int):
        super().__init__()
        self.h4, self.w4 = (h + 3) // 4, (w + 3) // 4
        self.fc = nn.Linear(embed_dim, 32 * self.h4 * self.w4)
        self.net = nn.Sequential(
            nn.ReLU(),
            nn.ConvTranspose2d(32, 16, 4, 2, 1), nn.ReLU(),
            nn.ConvTranspose2d(16, c, 4, 2, 1),
            nn.Upsample(size=(h, w), mode="bilinear", align_corners=False),
        )

    def forward(self, z):
        return self.net(self.fc(z).view(-1, 32, self.h4, self.w4))


@dataclass
class TrainerConfig:
    embed_dim: int = 16
    pretrain_epochs: int = 30
    refine_epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    refine_lr: float = 1e-4
    temperature: float = 1.0
    recon_weight: float = 0.1
    kmeans_restarts: int = 10
    seed: int = 0


class ToyDeepClusterer(ClusterModel):
    """Conv encoder + centroids; memberships are softmax(-||z - mu||^2 / T)."""

    def __init__(self, encoder: ConvEncoder, centroids: torch.Tensor, temperature: float,
                 input_shape, config: TrainerConfig | None = None):
        super().__init__()
        self.encoder = encoder
        self.centroids = centroids
        self.temperature = float(temperature)
        self.input_shape = tuple(input_shape)
        self.k = centroids.shape[0]
        self.config = config or TrainerConfig()
        self.freeze()

    def freeze(self):
        self.encoder.eval()
        self.encoder.requires_grad_(False)
        self.centroids = self.centroids.detach().clone()

    def _memberships(self, pixels):
        return _soft_assign(self.encoder(pixels), self.centroids, self.temperature)

    def embed(self, pixels):
        with torch.no_grad():
            return self.encoder(pixels)

    def clone(self) -> "ToyDeepClusterer":
        twin = copy.deepcopy(self)
        twin._query_count = 0
        return twin

    def state(self) -> dict:
        return {
            "kind": "toy",
            "k": self.k,
            "input_shape": list(self.input_shape),
            "temperature": self.temperature,
            "config": asdict(self.config),
            "encoder": self.encoder.state_dict(),
            "centroids": self.centroids,
        }


class KMeansModel(ClusterModel):
    """Lloyd's k-means on flattened pixels with a temperature-1 softmax readout."""

    def __init__(self, centroids: torch.Tensor, input_shape, temperature: float = 1.0):
        super().__init__()
        self.centroids = centroids.detach().clone()
        self.input_shape = tuple(input_shape)
        self.k = centroids.shape[0]
        self.temperature = float(temperature)

    def _memberships(self, pixels):
        return _soft_assign(pixels.flatten(1), self.centroids, self.temperature)

    def embed(self, pixels):
        return pixels.flatten(1).detach()

    def state(self) -> dict:
        return {"kind": "kmeans", "k": self.k, "input_shape": list(self.input_shape),
                "temperature": self.temperature, "centroids": self.centroids}


def _run_kmeans(x: np.ndarray, k: int, seed: int, restarts: int) -> KMeans:
    km = KMeans(n_clusters=k, algorithm="lloyd", n_init=restarts, random_state=seed).fit(x)
    counts = np.bincount(km.labels_, minlength=k)
    if (counts == 0).any():
        raise DegenerateClusteringError(f"k-means left clusters {np.flatnonzero(counts == 0)} empty")
    return km


def kmeans_baseline(dataset, k: int, seed: int = 0, restarts: int = 10) -> KMeansModel:
    images = as_unlabeled(dataset).images
    if k < 2:
        raise InvalidParameterError("k must be >= 2")
    if k > images.shape[0]:
        raise InvalidParameterError("k cannot exceed the number of samples")
    flat = images.flatten(1).double().numpy()
    km = _run_kmeans(flat, k, seed, restarts)
    return KMeansModel(torch.from_numpy(km.cluster_centers_).float(), images.shape[1:])


def sharpened_target(q: torch.Tensor) -> torch.Tensor:
    """Square the assignments, divide by soft cluster frequency, renormalize rows."""
    weight = q ** 2 / q.sum(0)
    return weight / weight.sum(1, keepdim=True)


def train_toy_clusterer(dataset, k: int, config: TrainerConfig | None = None) -> ToyDeepClusterer:
    """Autoencoder pretraining, k-means initialization, then self-training refinement.

    The autoencoder reconstructs illumination-normalized images. Refinement
    minimizes ``KL(P || Q)`` against the sharpened assignments ``P`` (recomputed
    each epoch) plus a small reconstruction term.
    """
    cfg = config or TrainerConfig()
    if k < 2:
        raise InvalidParameterError("k must be >= 2")
    images = as_unlabeled(dataset).images
    n, c, h, w = images.shape
    if k > n:
        raise InvalidParameterError("k cannot exceed the number of samples")
    bs = min(cfg.batch_size, n)
    torch.manual_seed(cfg.seed)
    shuffler = torch.Generator().manual_seed(cfg.seed)
    encoder = ConvEncoder(c, h, w, cfg.embed_dim)
    decoder = ConvDecoder(c, h, w, cfg.embed_dim)

    opt = torch.optim.Adam([*encoder.parameters(), *decoder.parameters()], lr=cfg.lr)
    for _ in range(cfg.pretrain_epochs):
        for idx in torch.randperm(n, generator=shuffler).split(bs):
            x = images[idx]
            loss = F.mse_loss(decoder(encoder(x)), encoder.normalize(x))
            opt.zero_grad()
            loss.backward()
            opt.step()

    encoder.eval()
    with torch.no_grad():
        z = encoder(images).double().numpy()
    km = _run_kmeans(z, k, cfg.seed, cfg.kmeans_restarts)
    centroids = nn.Parameter(torch.from_numpy(km.cluster_centers_).float())

    opt = torch.optim.Adam([*encoder.parameters(), *decoder.parameters(), centroids], lr=cfg.refine_lr)
    for _ in range(cfg.refine_epochs):
        with torch.no_grad():
            target = sharpened_target(_soft_assign(encoder(images), centroids, cfg.temperature))
        for idx in torch.randperm(n, generator=shuffler).split(bs):
            x = images[idx]
            z = encoder(x)
            q = _soft_assign(z, centroids, cfg.temperature)
            loss = F.kl_div(q.clamp_min(1e-12).log(), target[idx], reduction="batchmean")
            if cfg.recon_weight:
                loss = loss + cfg.recon_weight * F.mse_loss(decoder(z), encoder.normalize(x))
            opt.zero_grad()
            loss.backward()
            opt.step()

    return ToyDeepClusterer(encoder, centroids.data, cfg.temperature, (c, h, w), cfg)


def save_cluster_model(model: ClusterModel, path) -> None:
    torch.save({"schema_version": CHECKPOINT_SCHEMA_VERSION, **model.state()}, path)


def load_cluster_model(path) -> ClusterModel:
    state = torch.load(path, weights_only=False)
    if state.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise InvalidParameterError(f"{path}: unsupported checkpoint schema {state.get('schema_version')}")
    shape = tuple(state["input_shape"])
    if state["kind"] == "kmeans":
        return KMeansModel(state["centroids"], shape, state["temperature"])
    if state["kind"] == "toy":
        cfg = TrainerConfig(**state["config"])
        encoder = ConvEncoder(*shape, cfg.embed_dim)
        encoder.load_state_dict(state["encoder"])
        return ToyDeepClusterer(encoder, state["centroids"], state["temperature"], shape, cfg)
    raise InvalidParameterError(f"{path}: unknown model kind {state['kind']!r}")


def predict_labels(model: ClusterModel, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    """Hard labels for a full image tensor, one query per batch."""
    out = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            out.append(hard_labels(model.query(images[start:start + batch_size])))
    return np.concatenate(out)
