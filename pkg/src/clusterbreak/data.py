"""Image datasets in a fixed (n, c, h, w) float layout with pixels in [0, 1].

Ground-truth labels travel with a :class:`Dataset` for evaluation only. Training
and attack code receives an :class:`UnlabeledImages` view (see
:func:`as_unlabeled`) so labels cannot leak into optimization.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from scipy.fft import idctn

from .errors import EmptyClassError, InvalidParameterError, InvalidShapeError

DATA_DIR_ENV = "CLUSTERBREAK_DATA_DIR"
_MAGIC = b"CBDS0001"
_HEADER = struct.Struct("<8s5q")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".pgm", ".ppm", ".tif", ".tiff"}


@dataclass(frozen=True)
class ImageBatch:
    pixels: torch.Tensor
    ids: torch.Tensor

    def __post_init__(self):
        if self.pixels.dim() != 4 or self.pixels.shape[0] < 1:
            raise InvalidShapeError(f"expected (b, c, h, w) pixels, got {tuple(self.pixels.shape)}")
        if len(self.ids) != self.pixels.shape[0]:
            raise InvalidShapeError("ids and pixels disagree on batch size")

    def __len__(self):
        return self.pixels.shape[0]


@dataclass(frozen=True)
class UnlabeledImages:
    images: torch.Tensor

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass(frozen=True)
class Dataset:
    images: torch.Tensor
    labels: np.ndarray
    class_names: tuple[str, ...] | None = None
    k_true: int = field(default=0)

    def __post_init__(self):
        if self.images.dim() != 4:
            raise InvalidShapeError(f"expected (n, c, h, w) images, got {tuple(self.images.shape)}")
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if labels.shape != (self.images.shape[0],):
            raise InvalidShapeError("labels length must equal the number of images")
        if self.k_true == 0:
            object.__setattr__(self, "k_true", int(labels.max()) + 1 if len(labels) else 0)
        if len(labels) and (labels.min() < 0 or labels.max() >= self.k_true):
            raise InvalidParameterError("labels must lie in [0, k_true)")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        return Dataset(self.images[idx].clone(), self.labels[idx.numpy()].copy(),
                       self.class_names, self.k_true)

    def unlabeled(self) -> UnlabeledImages:
        return UnlabeledImages(self.images)


def as_unlabeled(data) -> UnlabeledImages:
    """Strip labels from a dataset; accepts datasets, views or raw tensors."""
    if isinstance(data, UnlabeledImages):
        return data
    if isinstance(data, Dataset):
        return data.unlabeled()
    if isinstance(data, torch.Tensor):
        return UnlabeledImages(data)
    raise TypeError(f"cannot take images from {type(data).__name__}")


def check_pixel_range(pixels: torch.Tensor) -> None:
    if pixels.numel() and (pixels.min() < 0.0 or pixels.max() > 1.0):
        raise InvalidParameterError("pixel values must lie in [0, 1]")


def _template_basis(k_true: int, c: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal smooth patterns, orthogonal to the illumination subspace when possible.

    Candidates are low-frequency DCT basis images; they are Gram-Schmidt
    orthogonalized after the constant and the two planar ramps.
    """
    d = c * h * w
    freqs = sorted(np.ndindex(c, h, w), key=lambda f: (sum(f), f))
    n_nuisance = 3 if d >= k_true + 3 else 0
    pool = freqs[1:] if d > k_true else freqs
    pool = pool[:max(2 * k_true, 8)]
    chosen = [pool[i] for i in rng.choice(len(pool), size=k_true, replace=False)]
    cols = []
    if n_nuisance:
        flat = illumination_field(np.eye(3), h, w)
        cols = [np.broadcast_to(f, (c, h, w)).ravel() for f in flat]
    for idx in chosen:
        coef = np.zeros((c, h, w))
        coef[idx] = 1.0
        cols.append(idctn(coef, norm="ortho").ravel())
    q, r = np.linalg.qr(np.stack(cols, axis=1))
    q = q[:, n_nuisance:] * np.sign(np.diag(r)[n_nuisance:])
    signs = rng.choice((-1.0, 1.0), size=k_true)
    return (q * signs).T.reshape(k_true, c, h, w)


def illumination_field(coef, h: int, w: int):
    """Planar fields ``a0 + a1 * u + a2 * v`` over ``u, v`` in [-1, 1]; ``coef`` is (n, 3)."""
    lib = torch if isinstance(coef, torch.Tensor) else np
    v = lib.linspace(-1.0, 1.0, h)[:, None]
    u = lib.linspace(-1.0, 1.0, w)[None, :]
    if lib is torch:
        u, v = u.to(coef.dtype), v.to(coef.dtype)
    return coef[:, 0, None, None] + coef[:, 1, None, None] * u + coef[:, 2, None, None] * v


def make_synthetic_image_dataset(n_per_class: int, k_true: int, c: int = 1, h: int = 16,
                                 w: int = 16, class_separation: float = 5.0, seed: int = 0,
                                 noise: float = 0.2, illumination: float = 0.1) -> Dataset:
    """Build a balanced dataset of smooth class templates plus bounded nuisance.

    Templates are ``0.5 + a * u_j`` for orthonormal low-frequency patterns ``u_j``,
    so any two class means sit ``class_separation`` pixel-noise standard
    deviations apart. Each image also gets a random planar illumination field
    (offset and two slopes, each uniform in ``[-illumination, illumination]``)
    and iid uniform pixel noise in ``[-noise, noise]``. Samples are ordered
    class by class.
    """
    if n_per_class < 1:
        raise InvalidParameterError("n_per_class must be >= 1")
    if k_true < 2:
        raise InvalidParameterError("k_true must be >= 2")
    if not class_separation > 0:
        raise InvalidParameterError("class_separation must be > 0")
    if not noise >= 0:
        raise InvalidParameterError("noise must be >= 0")
    if not illumination >= 0:
        raise InvalidParameterError("illumination must be >= 0")
    if c * h * w < k_true:
        raise InvalidShapeError("c*h*w must be at least k_true for distinct templates")

    rng = np.random.default_rng(seed)
    basis = _template_basis(k_true, c, h, w, rng)
    sigma = noise / np.sqrt(3.0) if noise > 0 else 1.0 / np.sqrt(3.0)
    amplitude = class_separation * sigma / np.sqrt(2.0)
    templates = 0.5 + amplitude * basis

    labels = np.repeat(np.arange(k_true), n_per_class)
    jitter = rng.uniform(-noise, noise, size=(len(labels), c, h, w))
    coef = rng.uniform(-illumination, illumination, size=(len(labels), 3))
    images = templates[labels] + jitter + illumination_field(coef, h, w)[:, None]
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    names = tuple(f"class_{j}" for j in range(k_true))
    return Dataset(torch.from_numpy(images), labels, names, k_true)


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Class-stratified split; labels are read here for bookkeeping only."""
    if not 0 < test_fraction < 1:
        raise InvalidParameterError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for cls in range(dataset.k_true):
        idx = np.flatnonzero(dataset.labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(test_idx))


def load_image_folder(path, image_size: tuple[int, int], channels: int | None = None) -> Dataset:
    """Load ``path/<class>/<image>`` files; classes are numbered in lexicographic order."""
    from PIL import Image, UnidentifiedImageError

    root = Path(path)
    if not root.is_dir():
        raise OSError(f"not a directory: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise OSError(f"no class subdirectories in {root}")
    mode = {None: None, 1: "L", 3: "RGB"}[channels]
    h, w = image_size
    images, labels = [], []
    for cls, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise EmptyClassError(f"class directory {class_dir.name!r} has no images")
        for f in files:
            try:
                with Image.open(f) as img:
                    if mode is None:
                        mode = "L" if img.mode in ("L", "1", "I", "I;16", "F") else "RGB"
                    arr = np.asarray(img.convert(mode).resize((w, h), Image.BILINEAR), dtype=np.float32)
            except (UnidentifiedImageError, OSError) as exc:
                raise OSError(f"cannot read image {f}: {exc}") from exc
            arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
            images.append(arr / 255.0)
            labels.append(cls)
    tensor = torch.from_numpy(np.clip(np.stack(images), 0.0, 1.0))
    return Dataset(tensor, np.asarray(labels), tuple(d.name for d in class_dirs), len(class_dirs))


def batches(dataset, batch_size: int, shuffle: bool = False, seed: int = 0) -> Iterator[ImageBatch]:
    """Yield one epoch of batches; the final batch may be short."""
    images = dataset.images if hasattr(dataset, "images") else dataset
    n = images.shape[0]
    if not 1 <= batch_size <= n:
        raise InvalidParameterError(f"batch_size must be in [1, {n}]")
    if shuffle:
        order = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    else:
        order = torch.arange(n)
    for start in range(0, n, batch_size):
        ids = order[start:start + batch_size]
        pixels = images[ids]
        check_pixel_range(pixels)
        yield ImageBatch(pixels, ids)


def save_dataset(dataset: Dataset, path) -> None:
    n, c, h, w = dataset.images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, n, c, h, w, dataset.k_true))
        fh.write(dataset.images.numpy().astype("<f4", copy=False).tobytes(order="C"))
        fh.write(dataset.labels.astype("<i4").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise OSError(f"{path}: truncated header")
    magic, n, c, h, w, k_true = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise OSError(f"{path}: not a clusterbreak dataset file")
    n_pix = n * c * h * w
    expected = _HEADER.size + 4 * n_pix + 4 * n
    if len(raw) != expected:
        raise OSError(f"{path}: expected {expected} bytes, found {len(raw)}")
    pixels = np.frombuffer(raw, dtype="<f4", count=n_pix, offset=_HEADER.size)
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=_HEADER.size + 4 * n_pix)
    images = torch.from_numpy(pixels.astype(np.float32).reshape(n, c, h, w))
    return Dataset(images, labels.astype(np.int64), None, int(k_true))


def resolve_dataset(spec: str, image_size: Sequence[int] = (16, 16), **synthetic) -> Dataset:
    """Interpret ``synthetic``, ``folder:<path>`` or ``file:<path>`` dataset specs.

    Relative paths are resolved against ``$CLUSTERBREAK_DATA_DIR`` when set.
    """
    def _path(p):
        root = os.environ.get(DATA_DIR_ENV)
        return Path(root) / p if root and not os.path.isabs(p) else Path(p)

    if spec == "synthetic":
        return make_synthetic_image_dataset(**synthetic)
    kind, _, rest = spec.partition(":")
    if kind == "folder" and rest:
        return load_image_folder(_path(rest), tuple(image_size))
    if kind == "file" and rest:
        return load_dataset(_path(rest))
    raise InvalidParameterError(f"unknown dataset spec {spec!r}")
