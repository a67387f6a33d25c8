from .config import ConfigLoader, RunConfig, build_config, config_schema, resolve_workers
from .workers import BlockExecutor, block_rng
from .jobs import JobDispatcher
from .visuals import VisualizationController

__all__ = [
    "ConfigLoader",
    "RunConfig",
    "build_config",
    "config_schema",
    "resolve_workers",
    "JobDispatcher",
    "VisualizationController",
    "BlockExecutor",
    "block_rng",
]
