"""
粗→細の階層サンプリング（逆 CDF による重点サンプリング）。

粗サンプルの合成重みを区分定数の確率密度とみなし、細サンプルを追加する。
サンプル位置は定数として扱い、逆伝播では位置への勾配を流さない。
"""
from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from common.errors import InputError
from common.geometry import RayBatch
from common.sdf import query_points

from .base import PointSampler, SampleBatch, SampleSet, composite_weights
from .unified import place_in_bins, unified_bins

LOG = logging.getLogger(__name__)


def inverse_cdf(
    edges: np.ndarray,
    weights: np.ndarray,
    n_fine: int,
    rng: Optional[np.random.Generator],
) -> np.ndarray:
    """
    (N, B+1) の境界と (N, B) の重みから (N, n_fine) の位置を引く。

    重みが全てゼロの行は一様 CDF にフォールバックする。rng が None なら
    u = (i + 0.5) / n_fine の決定的な分位点を使う。
    """
    n, bins = weights.shape
    w = np.clip(weights, 0.0, None)
    total = w.sum(axis=1, keepdims=True)
    w = np.where(total > 0, w, 1.0)
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((n, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    if rng is None:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (n, n_fine)).copy()
    else:
        u = rng.random((n, n_fine))

    idx = np.empty((n, n_fine), dtype=np.int64)
    for row in range(n):
        idx[row] = np.searchsorted(cdf[row], u[row], side="right") - 1
    idx = np.clip(idx, 0, bins - 1)

    c_lo = np.take_along_axis(cdf, idx, axis=1)
    p = np.take_along_axis(pdf, idx, axis=1)
    e_lo = np.take_along_axis(edges, idx, axis=1)
    e_hi = np.take_along_axis(edges, idx + 1, axis=1)
    frac = np.where(p > 0, (u - c_lo) / np.where(p > 0, p, 1.0), 0.5)
    frac = np.clip(frac, 0.0, 1.0)
    return e_lo + frac * (e_hi - e_lo)


def merge_samples(
    coarse_t: np.ndarray, fine_t: np.ndarray, t_near: np.ndarray, t_far: np.ndarray
) -> SampleBatch:
    """
    粗・細サンプルを結合・整列し β_k = z_{k+1} − z_k（最後は t_far まで）を付ける。

    t_far 直前に詰まって同じ値になった点は mask=False の詰め物として後ろへ寄せる。
    """
    coarse_t = np.atleast_2d(np.asarray(coarse_t, dtype=np.float64))
    fine_t = np.atleast_2d(np.asarray(fine_t, dtype=np.float64))
    t_near = np.asarray(t_near, dtype=np.float64).reshape(-1)
    t_far = np.asarray(t_far, dtype=np.float64).reshape(-1)
    t = np.sort(np.concatenate([coarse_t, fine_t], axis=1), axis=1)
    # 重複点は β=0 を生むので直後の表現可能値へずらす
    for k in range(1, t.shape[1]):
        t[:, k] = np.maximum(t[:, k], np.nextafter(t[:, k - 1], np.inf))
    t = np.minimum(t, np.nextafter(t_far, -np.inf)[:, None])
    keep = np.ones(t.shape, dtype=bool)
    keep[:, 1:] = t[:, 1:] > t[:, :-1]
    order = np.argsort(~keep, axis=1, kind="stable")
    t = np.take_along_axis(t, order, axis=1)
    mask = np.take_along_axis(keep, order, axis=1)
    count = mask.sum(axis=1)
    last = np.take_along_axis(t, (count - 1)[:, None], axis=1)
    t = np.where(mask, t, last)
    is_last = np.arange(t.shape[1])[None, :] == (count - 1)[:, None]
    following = np.concatenate([t[:, 1:], t_far[:, None]], axis=1)
    delta = np.where(is_last, t_far[:, None] - t, following - t)
    delta = np.where(mask, delta, 0.0)
    if not mask.all():
        LOG.debug("merge_samples: %d collided samples masked", int((~mask).sum()))
    return SampleBatch(t=t, delta=delta, mask=mask, t_near=t_near, t_far=t_far, strategy="hierarchical")


def sample_hierarchical(
    coarse: SampleSet,
    coarse_weights: np.ndarray,
    n_fine: int,
    rng: Optional[np.random.Generator] = None,
) -> SampleSet:
    """単一レイ版。coarse のビンに対する逆 CDF で n_fine 点を追加する。"""
    if n_fine < 1:
        raise InputError(f"n_fine は 1 以上が必要です: {n_fine}")
    w = np.asarray(coarse_weights, dtype=np.float64).reshape(1, -1)
    if w.shape[1] != len(coarse):
        raise InputError("coarse_weights の長さがサンプル数と一致しません")
    if np.any(w < 0):
        raise InputError("coarse_weights は非負である必要があります")
    fine = inverse_cdf(coarse.edges[None], w, n_fine, rng)
    merged = merge_samples(
        coarse.t_values[None], fine, np.array([coarse.t_near]), np.array([coarse.t_far])
    )
    return merged.row(0)


class HierarchicalSampler(PointSampler):
    """n_coarse 点の粗パスで重みを求め、n_fine 点を重点的に追加する。"""

    name = "hierarchical"

    def __init__(
        self,
        *,
        n_coarse: int = 64,
        n_fine: int = 128,
        jitter: bool = True,
        interpolation: str = "trilinear",
    ) -> None:
        super().__init__(jitter=jitter)
        if n_coarse < 1 or n_fine < 1:
            raise InputError(f"n_coarse / n_fine は 1 以上が必要です: {n_coarse}, {n_fine}")
        self.n_coarse = int(n_coarse)
        self.n_fine = int(n_fine)
        self.interpolation = interpolation

    def coarse(self, rays: RayBatch, rng) -> SampleBatch:
        step = (rays.t_far - rays.t_near) / self.n_coarse
        lo, width, mask = unified_bins(rays.t_near, rays.t_far, step, max_count=self.n_coarse)
        t = place_in_bins(lo, width, mask, rng)
        return SampleBatch(t=t, delta=width, mask=mask, t_near=rays.t_near, t_far=rays.t_far, strategy="unified")

    def sample(self, field, rays: RayBatch, rng, *, training: bool = True) -> SampleBatch:
        use_rng = rng if (training and self.jitter) else None
        coarse = self.coarse(rays, use_rng)
        pts = rays.origins[:, None, :] + coarse.t[..., None] * rays.directions[:, None, :]
        q = query_points(field, pts.reshape(-1, 3), interpolation=self.interpolation)
        sigma = q.sigma.reshape(coarse.t.shape)
        _, _, weights = composite_weights(sigma, coarse.delta)
        fine = inverse_cdf(coarse.edges, np.where(coarse.mask, weights, 0.0), self.n_fine, use_rng)
        LOG.debug("HierarchicalSampler: rays=%d coarse=%d fine=%d", len(rays), self.n_coarse, self.n_fine)
        return merge_samples(coarse.t, fine, rays.t_near, rays.t_far)
