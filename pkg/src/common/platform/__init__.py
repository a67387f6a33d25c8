from .adapter import EnvironmentAdapter

__all__ = ["EnvironmentAdapter"]
