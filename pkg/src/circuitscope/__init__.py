"""Dual-pathway circuit discovery, pathway analysis and steering on toy vision-language models."""

from .io import TOOL_VERSION as __version__

__all__ = ["__version__"]
