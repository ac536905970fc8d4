"""
keystego package.
One image-to-image backbone that purifies noisy images by default and hides or
reveals images when key-seeded weights fill its masked region.
"""
from .config import settings

__version__ = "1.0.0"
__all__ = ["settings"]
