"""HTTP client for the album grouping service."""

from __future__ import annotations

import logging
import time

import httpx

from .app import encode_image
from .service import ServiceError

log = logging.getLogger(__name__)

RETRYABLE = {429, 500, 502, 503, 504}


class AlbumClient:
    """Label-only client; each call is retried once on transient failures.

    ``http`` is either a base URL or a ready ``httpx.Client`` (for example a
    ``fastapi.testclient.TestClient``).
    """

    def __init__(self, http: str | httpx.Client, timeout: float = 30.0, retry_wait: float = 0.05):
        self.http = httpx.Client(base_url=http, timeout=timeout) if isinstance(http, str) else http
        self.retry_wait = retry_wait

    def close(self) -> None:
        self.http.close()

    def _call(self, method: str, path: str, **kwargs) -> dict:
        for attempt in (0, 1):
            try:
                resp = self.http.request(method, path, **kwargs)
            except httpx.TransportError as exc:
                if attempt:
                    raise ServiceError("unavailable", str(exc), 503) from exc
                log.warning("%s %s failed (%s); retrying once", method, path, exc)
                time.sleep(self.retry_wait)
                continue
            if resp.status_code < 400:
                return resp.json()
            if resp.status_code in RETRYABLE and not attempt:
                wait = float(resp.headers.get("Retry-After", self.retry_wait))
                log.warning("%s %s returned %d; retrying once", method, path, resp.status_code)
                time.sleep(wait)
                continue
            try:
                body = resp.json()
                code, message = body["code"], body["message"]
            except (ValueError, KeyError, TypeError):
                code, message = "http_error", resp.text
            raise ServiceError(code, message, resp.status_code)
        raise AssertionError("unreachable")

    def create_album(self) -> str:
        return self._call("POST", "/createAlbum")["token"]

    def add_image(self, token: str, image) -> str:
        data, shape = encode_image(image)
        return self._call("POST", "/addimage",
                          json={"token": token, "image": data, "shape": shape})["image_id"]

    def group_face(self, token: str) -> dict:
        return self._call("POST", "/groupFace", json={"token": token})

    def get_album_detail(self, token: str) -> list[tuple[str, int]]:
        body = self._call("GET", "/getAlbumDetail", params={"token": token})
        return [(row["image_id"], int(row["group_id"])) for row in body["images"]]
