"""Mock label-only album clustering service, HTTP app and client."""

from .app import create_app, decode_image, encode_image
from .client import AlbumClient
from .service import (Album, AlbumService, GroupingBackend, RateLimiter, ServiceError,
                      calibrate_threshold, normalize_groups)

__all__ = [
    "Album", "AlbumClient", "AlbumService", "GroupingBackend", "RateLimiter", "ServiceError",
    "calibrate_threshold", "create_app", "decode_image", "encode_image", "normalize_groups",
]
