from .base import Job, JobFactory

__all__ = ["Job", "JobFactory"]
