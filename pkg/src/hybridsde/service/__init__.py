"""HTTP service wrapping the library; the CLI talks to it in-process."""

from .app import create_app

__all__ = ["create_app"]
