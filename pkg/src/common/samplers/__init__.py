"""Ray point samplers (unified / hierarchical) and their factory."""
from .base import PointSampler, SampleBatch, SampleSet, composite_weights
from .factory import create_sampler
from .hierarchical import HierarchicalSampler, inverse_cdf, sample_hierarchical
from .unified import UnifiedSampler, sample_unified

__all__ = [
    "PointSampler",
    "SampleBatch",
    "SampleSet",
    "composite_weights",
    "create_sampler",
    "HierarchicalSampler",
    "UnifiedSampler",
    "inverse_cdf",
    "sample_hierarchical",
    "sample_unified",
]
