"""固定ステップ幅の一様サンプリング。"""
from __future__ import annotations

import logging
import math
from typing import Optional, Tuple

import numpy as np

from common.errors import InputError
from common.geometry import RayBatch

from .base import PointSampler, SampleBatch, SampleSet

LOG = logging.getLogger(__name__)

# 浮動小数の丸めで極小ビンが生えないよう、ビン数計算に使う余裕
_COUNT_EPS = 1e-9


def unified_bins(
    t_near: np.ndarray,
    t_far: np.ndarray,
    step: np.ndarray,
    *,
    max_count: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    各レイの区間をステップ幅でビン分割する。

    戻り値は (ビン下端 (N,K), ビン幅 (N,K), mask (N,K))。最後のビンは t_far で閉じる。
    """
    length = t_far - t_near
    count = np.maximum(np.ceil(length / step - _COUNT_EPS), 1).astype(np.int64)
    if max_count is not None:
        count = np.minimum(count, max_count)
    k = int(count.max()) if len(count) else 0
    idx = np.arange(k)[None, :]
    mask = idx < count[:, None]
    lo = t_near[:, None] + idx * step[:, None]
    last = idx == (count[:, None] - 1)
    hi = np.where(last, t_far[:, None], lo + step[:, None])
    width = np.where(mask, hi - lo, 0.0)
    lo = np.where(mask, lo, t_far[:, None])
    return lo, width, mask


def place_in_bins(
    lo: np.ndarray,
    width: np.ndarray,
    mask: np.ndarray,
    rng: Optional[np.random.Generator],
) -> np.ndarray:
    """ビン中心、または rng があればビン内一様ジッタ位置を返す。"""
    if rng is None:
        frac = np.full(lo.shape, 0.5)
    else:
        frac = rng.random(lo.shape)
    t = lo + frac * width
    # 詰め物は最後の有効サンプル位置へ寄せておく
    if mask.size and not mask.all():
        last_valid = np.take_along_axis(t, (mask.sum(axis=1) - 1)[:, None], axis=1)
        t = np.where(mask, t, last_valid)
    return t


def sample_unified(
    t_near: float,
    t_far: float,
    step: float,
    jitter: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> SampleSet:
    """区間 (t_near, t_far) を step 幅のビンに分け、各ビンに 1 点置く。"""
    if not step > 0:
        raise InputError(f"step は正である必要があります: {step}")
    if not t_far > t_near:
        raise InputError(f"区間が空です: ({t_near}, {t_far})")
    if t_far - t_near < step / 2.0:
        mid = 0.5 * (t_near + t_far)
        return SampleSet([mid], [t_far - t_near], t_near, t_far, "unified")
    lo, width, mask = unified_bins(np.array([t_near]), np.array([t_far]), np.array([float(step)]))
    t = place_in_bins(lo, width, mask, rng if jitter else None)
    return SampleSet(t[0, mask[0]], width[0, mask[0]], t_near, t_far, "unified")


class UnifiedSampler(PointSampler):
    """ステップ幅 = step_scale × voxel_size の一様サンプラ。"""

    name = "unified"

    def __init__(self, *, step_scale: float = 0.5, jitter: bool = True, max_samples: int = 4096) -> None:
        super().__init__(jitter=jitter)
        if not step_scale > 0:
            raise InputError(f"step_scale は正である必要があります: {step_scale}")
        self.step_scale = float(step_scale)
        self.max_samples = int(max_samples)

    def step_for(self, field) -> float:
        return self.step_scale * field.voxel_size

    def sample(self, field, rays: RayBatch, rng, *, training: bool = True) -> SampleBatch:
        step = np.full(len(rays), self.step_for(field))
        lo, width, mask = unified_bins(rays.t_near, rays.t_far, step, max_count=self.max_samples)
        use_rng = rng if (training and self.jitter) else None
        t = place_in_bins(lo, width, mask, use_rng)
        LOG.debug("UnifiedSampler: rays=%d max_k=%d", len(rays), t.shape[1] if t.ndim == 2 else 0)
        return SampleBatch(t=t, delta=width, mask=mask, t_near=rays.t_near, t_far=rays.t_far, strategy=self.name)


def expected_count(t_near: float, t_far: float, step: float) -> int:
    return max(1, math.ceil((t_far - t_near) / step - _COUNT_EPS))
