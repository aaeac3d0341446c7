"""Album store, grouping backend and the label-only service facade."""

from __future__ import annotations

import secrets
import sqlite3
import threading
import time
from dataclasses import dataclass

import numpy as np
import torch
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import pdist

from ..clustering import ClusterModel
from ..errors import InvalidParameterError


class ServiceError(Exception):
    """Service failure with a stable error code and an HTTP status."""

    def __init__(self, code: str, message: str, status: int):
        super().__init__(message)
        self.code = code
        self.message = message
        self.status = status

    def envelope(self) -> dict:
        return {"code": self.code, "message": self.message}


def unknown_token(token) -> ServiceError:
    return ServiceError("unknown_token", f"no album with token {token!r}", 404)


@dataclass
class Album:
    token: str
    image_ids: list[str]
    group_ids: list[int] | None = None


def normalize_groups(raw) -> np.ndarray:
    """Relabel to consecutive integers from 0 in order of first appearance."""
    mapping: dict = {}
    return np.array([mapping.setdefault(v, len(mapping)) for v in np.asarray(raw).tolist()],
                    dtype=np.int64)


class GroupingBackend:
    """Encoder features followed by average-linkage clustering cut at a distance threshold.

    The number of groups is inferred from the threshold, never fixed.
    """

    def __init__(self, encoder, threshold: float, input_shape=None):
        if threshold <= 0:
            raise InvalidParameterError("threshold must be positive")
        self.encoder = encoder
        self.threshold = float(threshold)
        self.input_shape = tuple(input_shape or getattr(encoder, "input_shape", ()) or ()) or None

    def features(self, images: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            if isinstance(self.encoder, ClusterModel):
                z = self.encoder.embed(images)
            else:
                z = self.encoder(images)
        return z.double().numpy()

    def group(self, images: torch.Tensor) -> np.ndarray:
        if images.shape[0] == 1:
            return np.zeros(1, dtype=np.int64)
        # condensed distances: a square feature matrix would otherwise be misread as distances
        tree = linkage(pdist(self.features(images)), method="average")
        return normalize_groups(fcluster(tree, t=self.threshold, criterion="distance"))


def calibrate_threshold(encoder, images: torch.Tensor, n_groups: int) -> float:
    """Cut height halfway between the merges that leave ``n_groups`` and ``n_groups - 1`` groups.

    Run once by the service owner on its own data; callers of the service never see it.
    """
    n = images.shape[0]
    if not 2 <= n_groups <= n - 1:
        raise InvalidParameterError("n_groups must lie in [2, n - 1]")
    feats = GroupingBackend(encoder, 1.0).features(images)
    heights = linkage(pdist(feats), method="average")[:, 2]
    return float((heights[n - n_groups - 1] + heights[n - n_groups]) / 2)


class RateLimiter:
    """Token bucket; ``acquire`` returns 0 on success or the seconds to wait."""

    def __init__(self, rate: float | None, burst: int | None = None, clock=time.monotonic):
        self.rate = rate
        self.capacity = float(burst or max(1, int(rate or 1)))
        self.tokens = self.capacity
        self.clock = clock
        self.stamp = clock()
        self.lock = threading.Lock()

    def acquire(self) -> float:
        if not self.rate:
            return 0.0
        with self.lock:
            now = self.clock()
            self.tokens = min(self.capacity, self.tokens + (now - self.stamp) * self.rate)
            self.stamp = now
            if self.tokens >= 1:
                self.tokens -= 1
                return 0.0
            return (1 - self.tokens) / self.rate


_SCHEMA = """
CREATE TABLE IF NOT EXISTS albums (token TEXT PRIMARY KEY, grouped INTEGER NOT NULL DEFAULT 0);
CREATE TABLE IF NOT EXISTS images (
    token TEXT NOT NULL, seq INTEGER NOT NULL, image_id TEXT NOT NULL,
    shape TEXT NOT NULL, pixels BLOB NOT NULL, group_id INTEGER,
    PRIMARY KEY (token, seq), UNIQUE (token, image_id));
"""


class AlbumService:
    """Label-only album clustering service persisted in an embedded SQLite file.

    Operations on one album are serialized by a per-album lock. Grouping
    writes all labels in a single transaction, so readers see either the old
    or the new grouping.
    """

    def __init__(self, backend: GroupingBackend, db_path=":memory:",
                 max_image_bytes: int = 1 << 20, rate_limit: float | None = None):
        self.backend = backend
        self.max_image_bytes = int(max_image_bytes)
        self.limiter = RateLimiter(rate_limit)
        self._db = sqlite3.connect(str(db_path), check_same_thread=False, isolation_level=None)
        self._db_lock = threading.Lock()
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        with self._db_lock:
            self._db.executescript(_SCHEMA)

    def close(self) -> None:
        self._db.close()

    def _album_lock(self, token: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(token, threading.Lock())

    def _execute(self, sql, params=()):
        with self._db_lock:
            return self._db.execute(sql, params).fetchall()

    def _require(self, token) -> None:
        if not isinstance(token, str) or not self._execute(
                "SELECT 1 FROM albums WHERE token = ?", (token,)):
            raise unknown_token(token)

    def throttle(self) -> None:
        wait = self.limiter.acquire()
        if wait:
            raise ServiceError("rate_limited", f"rate limit exceeded; retry in {wait:.3f}s", 429)

    def create_album(self) -> str:
        token = secrets.token_urlsafe(18)
        try:
            self._execute("INSERT INTO albums (token) VALUES (?)", (token,))
        except sqlite3.Error as exc:
            raise ServiceError("storage_error", str(exc), 500) from exc
        return token

    def add_image(self, token: str, image) -> str:
        pixels = np.ascontiguousarray(np.asarray(image, dtype=np.float32))
        if pixels.nbytes > self.max_image_bytes:
            raise ServiceError("payload_too_large",
                               f"image is {pixels.nbytes} bytes; limit is {self.max_image_bytes}", 413)
        shape = self.backend.input_shape
        if shape is not None and tuple(pixels.shape) != shape:
            raise ServiceError("bad_request", f"expected image shape {shape}, got {pixels.shape}", 400)
        if not np.isfinite(pixels).all():
            raise ServiceError("bad_request", "image contains non-finite values", 400)
        with self._album_lock(token):
            self._require(token)
            seq = self._execute("SELECT COUNT(*) FROM images WHERE token = ?", (token,))[0][0]
            image_id = f"img-{seq:06d}"
            self._execute(
                "INSERT INTO images (token, seq, image_id, shape, pixels) VALUES (?, ?, ?, ?, ?)",
                (token, seq, image_id, ",".join(map(str, pixels.shape)), pixels.tobytes()))
            # a new image invalidates the previous grouping until groupFace runs again
            self._execute("UPDATE albums SET grouped = 0 WHERE token = ?", (token,))
        return image_id

    def _load_images(self, token) -> tuple[list[str], torch.Tensor]:
        rows = self._execute("SELECT image_id, shape, pixels FROM images WHERE token = ? ORDER BY seq",
                             (token,))
        ids = [r[0] for r in rows]
        arrays = [np.frombuffer(r[2], dtype=np.float32).reshape(tuple(map(int, r[1].split(","))))
                  for r in rows]
        return ids, torch.from_numpy(np.stack(arrays)) if arrays else torch.empty(0)

    def group_face(self, token: str) -> dict:
        with self._album_lock(token):
            self._require(token)
            ids, images = self._load_images(token)
            if not ids:
                raise ServiceError("empty_album", "album has no images", 409)
            groups = self.backend.group(images)
            with self._db_lock:
                try:
                    self._db.execute("BEGIN")
                    self._db.executemany(
                        "UPDATE images SET group_id = ? WHERE token = ? AND image_id = ?",
                        [(int(g), token, i) for i, g in zip(ids, groups)])
                    self._db.execute("UPDATE albums SET grouped = 1 WHERE token = ?", (token,))
                    self._db.execute("COMMIT")
                except sqlite3.Error as exc:
                    self._db.execute("ROLLBACK")
                    raise ServiceError("storage_error", str(exc), 500) from exc
        return {"token": token, "images": len(ids), "groups": int(groups.max()) + 1}

    def get_album_detail(self, token: str) -> list[tuple[str, int]]:
        """Hard group labels only; soft memberships are never exposed."""
        self._require(token)
        if not self._execute("SELECT grouped FROM albums WHERE token = ?", (token,))[0][0]:
            raise ServiceError("not_grouped", "groupFace has not been run for this album", 409)
        rows = self._execute(
            "SELECT image_id, group_id FROM images WHERE token = ? ORDER BY seq", (token,))
        return [(i, int(g)) for i, g in rows]

    def album(self, token: str) -> Album:
        self._require(token)
        rows = self._execute("SELECT image_id, group_id FROM images WHERE token = ? ORDER BY seq",
                             (token,))
        grouped = self._execute("SELECT grouped FROM albums WHERE token = ?", (token,))[0][0]
        ids = [r[0] for r in rows]
        return Album(token, ids, [r[1] for r in rows] if grouped else None)
