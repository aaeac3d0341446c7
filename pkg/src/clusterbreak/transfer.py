"""Transferability matrices and surrogate attacks against label-only targets."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .attack import AttackConfig, evaluate, perturb_images, train_attack
from .clustering import ClusterModel
from .data import Dataset
from .errors import InvalidParameterError, LengthMismatchError
from .metrics import MetricsReport, report

METRICS = ("nmi", "ari", "acc")


@dataclass
class TransferMatrix:
    """``post_attack[metric][i, j]``: target ``j`` scored on samples crafted against source ``i``.

    Skipped cells (incompatible input shapes) hold NaN and are listed in ``skipped``.
    """

    sources: list[str]
    targets: list[str]
    post_attack: dict[str, np.ndarray]
    pre_attack: dict[str, np.ndarray]
    skipped: list[tuple[int, int, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        def clean(a):
            return [[None if np.isnan(v) else float(v) for v in row] for row in np.atleast_2d(a)]
        return {
            "sources": list(self.sources),
            "targets": list(self.targets),
            "post_attack": {m: clean(a) for m, a in self.post_attack.items()},
            "pre_attack": {m: [float(v) for v in a] for m, a in self.pre_attack.items()},
            "skipped": [{"source": i, "target": j, "reason": r} for i, j, r in self.skipped],
        }

    def write_csv(self, path, metric: str = "nmi") -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["source\\target", *self.targets])
            for sid, row in zip(self.sources, self.post_attack[metric]):
                writer.writerow([sid, *["skipped" if np.isnan(v) else f"{v:.10g}" for v in row]])
            writer.writerow(["pre_attack", *[f"{v:.10g}" for v in self.pre_attack[metric]]])

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def _input_shape(obj) -> tuple | None:
    shape = getattr(obj, "input_shape", None)
    return tuple(shape) if shape is not None else None


def transfer_matrix(victims: list[ClusterModel], generators: list, eval_set: Dataset,
                    ids: list[str] | None = None) -> TransferMatrix:
    """Score every victim on the adversarial samples of every source generator."""
    if len(victims) != len(generators):
        raise LengthMismatchError("need exactly one generator per source victim")
    if not victims:
        raise InvalidParameterError("at least one victim is required")
    ids = list(ids) if ids is not None else [f"model{i}" for i in range(len(victims))]
    if len(ids) != len(victims):
        raise LengthMismatchError("ids must match victims")
    n = len(victims)
    data_shape = tuple(eval_set.images.shape[1:])

    pre = {m: np.full(n, np.nan) for m in METRICS}
    for j, target in enumerate(victims):
        if _input_shape(target) not in (None, data_shape):
            continue
        rep = evaluate(target, eval_set.images, eval_set.labels)
        for m in METRICS:
            pre[m][j] = getattr(rep, m)

    post = {m: np.full((n, n), np.nan) for m in METRICS}
    skipped = []
    for i, gen in enumerate(generators):
        if _input_shape(gen) not in (None, data_shape):
            skipped.extend((i, j, "generator input shape differs from eval set") for j in range(n))
            continue
        adv, _ = perturb_images(gen, eval_set.images)
        for j, target in enumerate(victims):
            if _input_shape(target) not in (None, data_shape):
                skipped.append((i, j, "target input shape differs from eval set"))
                continue
            rep = evaluate(target, adv, eval_set.labels)
            for m in METRICS:
                post[m][i, j] = getattr(rep, m)
    return TransferMatrix(ids, list(ids), post, pre, skipped)


def submit_album(client, images: torch.Tensor) -> np.ndarray:
    """Upload images to a fresh album, group them and return labels in upload order."""
    token = client.create_album()
    order = [client.add_image(token, img) for img in images]
    client.group_face(token)
    groups = dict(client.get_album_detail(token))
    return np.array([groups[i] for i in order], dtype=np.int64)


def surrogate_attack(target, surrogate: ClusterModel, dataset: Dataset,
                     config: AttackConfig | None = None, generator=None,
                     eval_set: Dataset | None = None) -> tuple[MetricsReport, MetricsReport]:
    """Train the attack on ``surrogate`` and score the label-only ``target`` on clean and adversarial uploads.

    ``target`` needs only ``create_album``, ``add_image``, ``group_face`` and
    ``get_album_detail``. Pass ``generator`` to reuse an already trained attack.
    """
    if generator is None:
        generator, _ = train_attack(surrogate, dataset, config)
    eval_set = eval_set if eval_set is not None else dataset
    adv, _ = perturb_images(generator, eval_set.images)
    pre = report(submit_album(target, eval_set.images), eval_set.labels)
    post = report(submit_album(target, adv), eval_set.labels)
    return pre, post


def sample_per_identity(dataset: Dataset, per_identity: int, rng: np.random.Generator) -> Dataset:
    picks = []
    for label in np.unique(dataset.labels):
        members = np.flatnonzero(dataset.labels == label)
        if len(members) < per_identity:
            raise InvalidParameterError(f"identity {label} has only {len(members)} images")
        picks.append(rng.choice(members, per_identity, replace=False))
    return dataset.subset(np.sort(np.concatenate(picks)))


@dataclass
class ResamplingResult:
    pre: list[MetricsReport]
    post: list[MetricsReport]

    @property
    def mean_pre_nmi(self) -> float:
        return float(np.mean([r.nmi for r in self.pre]))

    @property
    def mean_post_nmi(self) -> float:
        return float(np.mean([r.nmi for r in self.post]))

    def to_dict(self) -> dict:
        return {
            "runs": len(self.pre),
            "mean_pre_nmi": self.mean_pre_nmi,
            "mean_post_nmi": self.mean_post_nmi,
            "pre": [r.to_dict() for r in self.pre],
            "post": [r.to_dict() for r in self.post],
        }


def surrogate_resampling(target, surrogate: ClusterModel, train_set: Dataset, pool: Dataset,
                         config: AttackConfig | None = None, generator=None, runs: int = 10,
                         per_identity: int = 10, seed: int = 0) -> ResamplingResult:
    """Repeat the surrogate attack on ``runs`` seeded draws of ``per_identity`` images per identity.

    The generator is trained once on ``train_set`` against the surrogate.
    """
    if runs < 1:
        raise InvalidParameterError("runs must be >= 1")
    if generator is None:
        generator, _ = train_attack(surrogate, train_set, config)
    pres, posts = [], []
    for child in np.random.SeedSequence(seed).spawn(runs):
        sample = sample_per_identity(pool, per_identity, np.random.default_rng(child))
        pre, post = surrogate_attack(target, surrogate, train_set, generator=generator,
                                     eval_set=sample)
        pres.append(pre)
        posts.append(post)
    return ResamplingResult(pres, posts)
