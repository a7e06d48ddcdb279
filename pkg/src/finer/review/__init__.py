"""Human-in-the-loop review backend: batch labeling store and HTTP API."""

from .store import ReviewStore, ReviewTask
from .api import create_app

__all__ = ["ReviewStore", "ReviewTask", "create_app"]
