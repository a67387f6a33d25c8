"""Shared functionality for the semantic density field renderer and trainer."""

__all__ = [
    "errors",
    "evalio",
    "geometry",
    "gradients",
    "jobs",
    "losses",
    "platform",
    "raypool",
    "renderer",
    "runtime",
    "samplers",
    "sdf",
    "synthworld",
    "trainer",
]
