"""Semantic density field runner package."""

__all__ = ["occ_runner"]
