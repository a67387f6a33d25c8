"""設定からサンプラを生成するファクトリ。"""
from __future__ import annotations

import logging
from typing import Any, Callable, Dict, Mapping

from common.errors import ConfigError

from .base import PointSampler
from .hierarchical import HierarchicalSampler
from .unified import UnifiedSampler

LOG = logging.getLogger(__name__)

SamplerCreator = Callable[[Mapping[str, Any]], PointSampler]


def _create_unified(cfg: Mapping[str, Any]) -> PointSampler:
    return UnifiedSampler(step_scale=float(cfg.get("step_scale", 0.5)), jitter=bool(cfg.get("jitter", True)))


def _create_hierarchical(cfg: Mapping[str, Any]) -> PointSampler:
    return HierarchicalSampler(
        n_coarse=int(cfg.get("n_coarse", 64)),
        n_fine=int(cfg.get("n_fine", 128)),
        jitter=bool(cfg.get("jitter", True)),
        interpolation=str(cfg.get("interpolation", "trilinear")),
    )


_REGISTRY: Dict[str, SamplerCreator] = {
    "unified": _create_unified,
    "hierarchical": _create_hierarchical,
}


def create_sampler(cfg: Mapping[str, Any]) -> PointSampler:
    """renderer 設定の `sampler` キーに応じてサンプラを生成する。"""
    name = cfg.get("sampler", "unified")
    creator = _REGISTRY.get(name)
    if creator is None:
        raise ConfigError(f"未知のサンプラです: {name!r}", pointer="/renderer/sampler")
    sampler = creator(cfg)
    LOG.debug("create_sampler -> %r", sampler)
    return sampler
