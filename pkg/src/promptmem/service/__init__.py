"""HTTP surface of the package."""

from .app import app

__all__ = ["app"]
