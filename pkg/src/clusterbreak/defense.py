"""Defender-side tools: feature-space Mahalanobis detection and adversarial retraining."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.cluster import KMeans
from sklearn.decomposition import PCA

from .attack import perturb_images
from .clustering import ClusterModel, ToyDeepClusterer, _soft_assign, sharpened_target
from .data import as_unlabeled
from .errors import (DegenerateClusteringError, InsufficientDataError, InvalidParameterError,
                     SingularCovarianceError)

MIN_HOLDOUT = 100


def _feature_fn(encoder):
    if encoder is None:
        return lambda pixels: pixels.flatten(1)
    if isinstance(encoder, ClusterModel):
        return encoder.embed
    return encoder


@dataclass
class GaussianComponent:
    mean: np.ndarray
    precision: np.ndarray


@dataclass
class AnomalyDetector:
    components: list[GaussianComponent]
    shrinkage: float
    encoder: object = None
    threshold: float | None = None

    def features(self, images: torch.Tensor, batch_size: int = 512) -> np.ndarray:
        fn = _feature_fn(self.encoder)
        with torch.no_grad():
            parts = [fn(images[i:i + batch_size]) for i in range(0, images.shape[0], batch_size)]
        return torch.cat(parts).double().numpy()

    def score_features(self, feats: np.ndarray) -> np.ndarray:
        """Minimum Mahalanobis distance to any component."""
        feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        best = np.full(len(feats), np.inf)
        for comp in self.components:
            diff = feats - comp.mean
            d2 = np.einsum("ij,jk,ik->i", diff, comp.precision, diff)
            best = np.minimum(best, d2)
        return np.sqrt(np.maximum(best, 0.0))

    def score(self, images: torch.Tensor) -> np.ndarray:
        return self.score_features(self.features(images))

    def flag(self, images: torch.Tensor) -> np.ndarray:
        if self.threshold is None:
            raise InvalidParameterError("detector threshold has not been calibrated")
        return self.score(images) > self.threshold


def shrunk_covariance(x: np.ndarray, shrinkage: float) -> np.ndarray:
    """``(1 - lambda) * S + lambda * (tr(S) / d) * I`` for the sample covariance ``S``."""
    d = x.shape[1]
    cov = np.cov(x, rowvar=False, bias=False).reshape(d, d) if len(x) > 1 else np.zeros((d, d))
    target = np.trace(cov) / d if np.trace(cov) > 0 else 1.0
    return (1.0 - shrinkage) * cov + shrinkage * target * np.eye(d)


def fit_gaussians(feats: np.ndarray, components: int = 1, shrinkage: float = 0.1,
                  seed: int = 0) -> AnomalyDetector:
    if components < 1:
        raise InvalidParameterError("components must be >= 1")
    if not 0 < shrinkage <= 1:
        raise InvalidParameterError("shrinkage must lie in (0, 1]")
    feats = np.asarray(feats, dtype=np.float64)
    if components == 1:
        assign = np.zeros(len(feats), dtype=int)
    else:
        assign = KMeans(n_clusters=components, n_init=10, random_state=seed).fit_predict(feats)
    fitted = []
    for j in range(components):
        members = feats[assign == j]
        if len(members) == 0:
            raise DegenerateClusteringError(f"detector component {j} is empty")
        cov = shrunk_covariance(members, shrinkage)
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise SingularCovarianceError(
                f"component {j} covariance is singular; increase shrinkage above {shrinkage}") from None
        if np.linalg.cond(cov) > 1e12:
            raise SingularCovarianceError(
                f"component {j} covariance is ill-conditioned; increase shrinkage above {shrinkage}")
        fitted.append(GaussianComponent(members.mean(0), np.linalg.inv(cov)))
    return AnomalyDetector(fitted, shrinkage)


def fit_detector(clean, encoder=None, components: int = 1, shrinkage: float = 0.1,
                 seed: int = 0) -> AnomalyDetector:
    """Fit per-component shrunk Gaussians on encoder features of clean images.

    ``encoder`` may be a :class:`ClusterModel` (its ``embed`` is used), any
    callable on pixel batches, or ``None`` for raw flattened pixels.
    """
    images = as_unlabeled(clean).images
    probe = AnomalyDetector([], shrinkage, encoder)
    det = fit_gaussians(probe.features(images), components, shrinkage, seed)
    det.encoder = encoder
    return det


def calibrate_threshold(det: AnomalyDetector, clean_holdout, target_fpr: float = 0.05) -> float:
    """Set the threshold to the ``(1 - target_fpr)`` order statistic of holdout scores."""
    if not 0 < target_fpr < 1:
        raise InvalidParameterError("target_fpr must lie in (0, 1)")
    images = as_unlabeled(clean_holdout).images
    if images.shape[0] < MIN_HOLDOUT:
        raise InsufficientDataError(f"need at least {MIN_HOLDOUT} holdout samples")
    scores = np.sort(det.score(images))
    rank = math.ceil(round((1 - target_fpr) * len(scores), 9))
    det.threshold = float(scores[max(rank, 1) - 1])
    return det.threshold


@dataclass
class DetectionReport:
    injected: int
    detected: int
    false_positives: int
    benign: int
    trials: int
    detection_rate: float
    false_positive_rate: float
    per_trial: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def injection_experiment(det: AnomalyDetector, clean_set, generator, trials: int = 10,
                         seed: int = 0, n_images: int | None = 800,
                         batch_size: int = 256) -> DetectionReport:
    """Randomly perturb each image with probability 1/2 per trial and count detections.

    Rates are averaged over trials; the generator is deterministic, so the
    adversarial version of every image is computed once up front.
    """
    if trials < 1:
        raise InvalidParameterError("trials must be >= 1")
    images = as_unlabeled(clean_set).images
    if n_images is not None:
        images = images[:n_images]
    adv, _ = perturb_images(generator, images, batch_size)
    flag_clean = det.score(images) > det.threshold
    flag_adv = det.score(adv) > det.threshold

    per_trial = []
    for child in np.random.SeedSequence(seed).spawn(trials):
        mask = np.random.default_rng(child).random(len(images)) < 0.5
        injected = int(mask.sum())
        detected = int(flag_adv[mask].sum())
        benign = len(images) - injected
        fp = int(flag_clean[~mask].sum())
        per_trial.append({
            "injected": injected, "detected": detected, "missed": injected - detected,
            "benign": benign, "false_positives": fp,
            "detection_rate": detected / injected if injected else 0.0,
            "false_positive_rate": fp / benign if benign else 0.0,
        })
    total = {key: sum(t[key] for t in per_trial)
             for key in ("injected", "detected", "false_positives", "benign")}
    return DetectionReport(
        trials=trials, per_trial=per_trial, **total,
        detection_rate=float(np.mean([t["detection_rate"] for t in per_trial])),
        false_positive_rate=float(np.mean([t["false_positive_rate"] for t in per_trial])),
    )


@dataclass
class PCAOverlap:
    clean_coords: np.ndarray
    adversarial_coords: np.ndarray
    overlap_score: float
    explained_variance_ratio: np.ndarray


def _nearest_is_clean(coords: np.ndarray, n_clean: int, chunk: int = 512) -> np.ndarray:
    """For each adversarial row, whether a clean point attains the nearest distance."""
    out = np.empty(len(coords) - n_clean, dtype=bool)
    sq = (coords ** 2).sum(1)
    for start in range(n_clean, len(coords), chunk):
        rows = np.arange(start, min(start + chunk, len(coords)))
        d2 = sq[rows, None] + sq[None, :] - 2 * coords[rows] @ coords.T
        d2 = np.maximum(d2, 0.0)
        d2[np.arange(len(rows)), rows] = np.inf
        nearest = d2.min(1, keepdims=True)
        tol = 1e-12 * np.maximum(1.0, nearest)
        out[rows - n_clean] = (d2[:, :n_clean] <= nearest + tol).any(1)
    return out


def pca_overlap(clean_set, adversarial_set, n_components: int = 3, features=None) -> PCAOverlap:
    """Project both sets with a PCA fit on their union and measure how intermixed they are.

    The overlap score is the fraction of adversarial points whose nearest
    neighbour (excluding itself) is a clean point; ties count as clean.
    """
    clean = as_unlabeled(clean_set).images
    adv = as_unlabeled(adversarial_set).images
    if clean.shape[0] != adv.shape[0]:
        raise InvalidParameterError("clean and adversarial sets must have equal counts")
    fn = _feature_fn(features)
    with torch.no_grad():
        union = torch.cat([fn(clean), fn(adv)]).double().numpy()
    if np.allclose(union.var(0).sum(), 0.0):
        raise InvalidParameterError("cannot run PCA on zero-variance data")
    pca = PCA(n_components=n_components, svd_solver="full")
    coords = pca.fit_transform(union)
    n = clean.shape[0]
    score = float(_nearest_is_clean(coords, n).mean())
    return PCAOverlap(coords[:n], coords[n:], score, pca.explained_variance_ratio_)


def write_pca_csv(result: PCAOverlap, path) -> None:
    k = result.clean_coords.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "is_adversarial", *[f"pc{i + 1}" for i in range(k)]])
        for flag, coords in ((0, result.clean_coords), (1, result.adversarial_coords)):
            for i, row in enumerate(coords):
                writer.writerow([i, flag, *[f"{v:.10g}" for v in row]])


def adversarial_retrain(victim: ToyDeepClusterer, dataset, generator, epochs: int = 5,
                        lr: float = 1e-4, anchor_weight: float = 1.0,
                        consistency_weight: float = 1.0, batch_size: int = 64, seed: int = 0) -> ToyDeepClusterer:
    """Fine-tune a copy of ``victim`` so perturbed images keep their clean assignment.

    Each batch mixes clean images with their perturbed versions. The loss is
    ``KL(P || q_adv) + consistency_weight * KL(q_clean || q_adv)
    + anchor_weight * ||z_clean - z_orig||^2``, where ``P`` is the original
    model's sharpened clean assignment computed once. The anchor keeps clean
    utility. Centroids stay fixed and the original model is untouched.
    """
    if epochs < 0:
        raise InvalidParameterError("epochs must be >= 0")
    if anchor_weight < 0 or consistency_weight < 0:
        raise InvalidParameterError("loss weights must be >= 0")
    model = victim.clone()
    if epochs == 0:
        return model
    images = as_unlabeled(dataset).images
    n = images.shape[0]
    adv_all, _ = perturb_images(generator, images)
    with torch.no_grad():
        anchor = victim.encoder(images)
        target = sharpened_target(_soft_assign(anchor, victim.centroids, victim.temperature))
    torch.manual_seed(seed)
    shuffler = torch.Generator().manual_seed(seed)
    encoder = model.encoder.train().requires_grad_(True)
    opt = torch.optim.Adam(encoder.parameters(), lr=lr)
    for _ in range(epochs):
        for idx in torch.randperm(n, generator=shuffler).split(min(batch_size, n)):
            z_clean = encoder(images[idx])
            q_clean = _soft_assign(z_clean, model.centroids, model.temperature)
            q_adv = _soft_assign(encoder(adv_all[idx]), model.centroids, model.temperature)
            log_adv = q_adv.clamp_min(1e-12).log()
            drift = (z_clean - anchor[idx]).pow(2).sum(1).mean()
            loss = (F.kl_div(log_adv, target[idx], reduction="batchmean")
                    + consistency_weight * F.kl_div(log_adv, q_clean, reduction="batchmean")
                    + anchor_weight * drift)
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.freeze()
    return model
