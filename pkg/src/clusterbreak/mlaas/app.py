"""HTTP front end for :class:`AlbumService` with a ``{code, message}`` error envelope."""

from __future__ import annotations

import base64
import binascii
import math

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .service import AlbumService, ServiceError


class TokenBody(BaseModel):
    token: str


class ImageBody(BaseModel):
    token: str
    image: str
    shape: list[int]


def decode_image(body: ImageBody, max_bytes: int) -> np.ndarray:
    if not body.shape or any(d <= 0 for d in body.shape):
        raise ServiceError("bad_request", "shape must be a list of positive integers", 400)
    # base64 inflates by 4/3; reject oversize payloads before decoding them
    if len(body.image) * 3 // 4 > max_bytes + 3:
        raise ServiceError("payload_too_large", f"image payload exceeds {max_bytes} bytes", 413)
    try:
        raw = base64.b64decode(body.image, validate=True)
    except (binascii.Error, ValueError):
        raise ServiceError("bad_request", "image is not valid base64", 400) from None
    if len(raw) != 4 * math.prod(body.shape):
        raise ServiceError("bad_request", "decoded size does not match the declared float32 shape", 400)
    return np.frombuffer(raw, dtype="<f4").reshape(body.shape)


def encode_image(pixels) -> tuple[str, list[int]]:
    arr = np.ascontiguousarray(np.asarray(pixels, dtype="<f4"))
    return base64.b64encode(arr.tobytes()).decode("ascii"), list(arr.shape)


def create_app(service: AlbumService) -> FastAPI:
    app = FastAPI(title="album grouping service")
    app.state.service = service

    @app.exception_handler(ServiceError)
    async def _service_error(request: Request, exc: ServiceError):
        headers = {}
        if exc.status == 429:
            headers["Retry-After"] = f"{max(1.0 / (service.limiter.rate or 1), 0.001):.3f}"
        return JSONResponse(exc.envelope(), status_code=exc.status, headers=headers)

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        return JSONResponse({"code": "bad_request", "message": str(exc.errors())}, status_code=400)

    @app.middleware("http")
    async def _throttle(request: Request, call_next):
        try:
            service.throttle()
        except ServiceError as exc:
            return await _service_error(request, exc)
        return await call_next(request)

    @app.post("/createAlbum")
    def create_album():
        return {"token": service.create_album()}

    @app.post("/addimage")
    def add_image(body: ImageBody):
        pixels = decode_image(body, service.max_image_bytes)
        return {"image_id": service.add_image(body.token, pixels)}

    @app.post("/groupFace")
    def group_face(body: TokenBody):
        return service.group_face(body.token)

    @app.get("/getAlbumDetail")
    def get_album_detail(token: str):
        detail = service.get_album_detail(token)
        return {"token": token,
                "images": [{"image_id": i, "group_id": g} for i, g in detail]}

    return app
