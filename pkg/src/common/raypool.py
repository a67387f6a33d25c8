"""
多フレームのレイ教師集合（レイプール）と重み付きサンプリング。

現フレームのレイに加えて、前後 m_aux/2 フレームで生成したレイを各フレームの
エゴ姿勢で現フレーム座標へ移す（補助レイ）。各レイの抽出重みは
    W = W_b · W_t
    W_b = clamp(exp(λ_s (max(M) / N(C(r)) − 1)), 1, W_max)   クラス頻度バランス
    W_t = 1（現フレーム）| λ_dyn（補助・動的クラス）| λ_adj（補助・静的クラス）
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Optional, Sequence, Tuple

import numpy as np

from common.errors import InputError
from common.geometry import Box, Pose, Ray, RayBatch, intersect_box, pixel_rays, transform_rays
from common.runtime.config import RayPoolConfig

if TYPE_CHECKING:  # pragma: no cover
    from common.synthworld import Camera, LabelImage, Scene

__all__ = [
    "FrameLabels",
    "RayPool",
    "window_offsets",
    "build_pool",
    "pool_from_scene",
    "balance_weight",
    "balance_weights",
    "temporal_weight",
    "temporal_weights",
    "assign_weights",
    "sample_indices",
    "sample_batch",
]

LOG = logging.getLogger(__name__)


@dataclass
class FrameLabels:
    """1 フレーム分の教師: エゴ姿勢とカメラごとのラベル画像。"""

    ego_pose: Pose
    images: Sequence["LabelImage"]


@dataclass
class RayPool:
    """
    現フレーム座標で表したレイ集合と抽出重み。

    rays はフィールドのボックスで切り詰め済み。class_counts は現フレームと補助
    フレームを合わせた全レイでのクラス別本数。
    """

    rays: RayBatch
    class_counts: np.ndarray
    balance: np.ndarray
    temporal: np.ndarray
    weights: np.ndarray
    config: RayPoolConfig
    dynamic_classes: Tuple[int, ...]
    current_index: int

    def __len__(self) -> int:
        return len(self.rays)

    @property
    def num_classes(self) -> int:
        return len(self.class_counts)

    def summary(self) -> Dict[str, object]:
        offsets, counts = np.unique(self.rays.frame_offset, return_counts=True)
        return {
            "rays": len(self),
            "current_index": self.current_index,
            "m_aux": self.config.m_aux,
            "class_counts": self.class_counts.tolist(),
            "rays_per_offset": {int(o): int(c) for o, c in zip(offsets, counts)},
            "weight_min": float(self.weights.min()) if len(self) else 0.0,
            "weight_max": float(self.weights.max()) if len(self) else 0.0,
        }


# ---------------------------------------------------------------------------#
# プール構築
# ---------------------------------------------------------------------------#
def window_offsets(m_aux: int) -> Tuple[int, ...]:
    """現フレーム (0) を先頭に、−1, +1, −2, +2, ... の順で並べたオフセット。"""
    if m_aux < 0 or m_aux % 2:
        raise InputError(f"m_aux は 0 以上の偶数である必要があります: {m_aux}")
    out = [0]
    for k in range(1, m_aux // 2 + 1):
        out.extend((-k, k))
    return tuple(out)


def _image_rays(camera: "Camera", image: "LabelImage", offset: int) -> RayBatch:
    origins, dirs = pixel_rays(camera.intrinsics, camera.mount)
    if image.shape != (camera.intrinsics.height, camera.intrinsics.width):
        raise InputError(
            f"ラベル画像の形状 {image.shape} がカメラ {camera.intrinsics.width}x{camera.intrinsics.height} と一致しません"
        )
    n = len(origins)
    return RayBatch(
        origins=origins,
        directions=dirs,
        t_near=np.zeros(n),
        t_far=np.full(n, np.inf),
        frame_offset=np.full(n, offset, dtype=np.int64),
        sem_label=image.sem.reshape(-1),
        depth_label=image.depth.reshape(-1),
    )


def build_pool(
    frames: Sequence[Optional[FrameLabels]],
    current_index: int,
    m_aux: int,
    cameras: Sequence["Camera"],
    bounds: Box,
    *,
    config: Optional[RayPoolConfig] = None,
    dynamic_classes: Sequence[int] = (),
    num_classes: Optional[int] = None,
) -> RayPool:
    """
    現フレームと前後 m_aux/2 フレームの全画素レイを集め、現フレーム座標へ移す。

    ボックスに当たらないレイは捨てる。ウィンドウ内に欠けたフレームがあれば InputError。
    """
    config = config or RayPoolConfig(m_aux=m_aux)
    offsets = window_offsets(m_aux)
    for k in offsets:
        idx = current_index + k
        if not 0 <= idx < len(frames) or frames[idx] is None:
            raise InputError(f"フレーム {idx} がありません（現フレーム {current_index}, m_aux={m_aux}）")

    current = frames[current_index]
    parts = []
    for k in offsets:
        src = frames[current_index + k]
        if len(src.images) != len(cameras):  # type: ignore[union-attr]
            raise InputError(f"フレーム {current_index + k} の画像数がカメラ数と一致しません")
        batch = RayBatch.concat([_image_rays(cam, img, k) for cam, img in zip(cameras, src.images)])  # type: ignore[union-attr]
        parts.append(transform_rays(batch, src.ego_pose, current.ego_pose))  # type: ignore[union-attr]
    rays = RayBatch.concat(parts)

    t0, t1, hit = intersect_box(rays.origins, rays.directions, rays.t_near, rays.t_far, bounds)
    dropped = int((~hit).sum())
    if dropped:
        LOG.warning("ボックスに当たらないレイを %d 本除外しました", dropped)
    rays = rays.take(hit)
    rays.t_near = t0[hit]
    rays.t_far = t1[hit]
    if len(rays) == 0:
        raise InputError("フィールドのボックスに当たるレイがありません")

    if num_classes is None:
        num_classes = int(rays.sem_label.max()) + 1
    if rays.sem_label.min() < 0 or rays.sem_label.max() >= num_classes:
        raise InputError(f"ラベルが [0, {num_classes}) の範囲外です")
    counts = np.bincount(rays.sem_label, minlength=num_classes)
    pool = RayPool(
        rays=rays,
        class_counts=counts,
        balance=np.ones(len(rays)),
        temporal=np.ones(len(rays)),
        weights=np.ones(len(rays)),
        config=config,
        dynamic_classes=tuple(int(c) for c in dynamic_classes),
        current_index=current_index,
    )
    assign_weights(pool)
    LOG.info("レイプール: %s", pool.summary())
    return pool


def pool_from_scene(scene: "Scene", config: Optional[RayPoolConfig] = None) -> RayPool:
    """シーンのラベル画像からプールを作る。current_index と dynamic_classes は未指定ならシーンの値。"""
    config = config or RayPoolConfig()
    current = scene.reference if config.current_index is None else config.current_index
    if not 0 <= current < scene.frame_count:
        raise InputError(f"current_index {current} は軌跡 [0, {scene.frame_count}) の範囲外です")
    half = config.m_aux // 2
    frames: list = [None] * scene.frame_count
    for idx in range(max(0, current - half), min(scene.frame_count, current + half + 1)):
        frames[idx] = FrameLabels(
            scene.ego_poses[idx], [scene.label_image(idx, c) for c in range(len(scene.rig))]
        )
    dynamic = scene.dynamic_classes if config.dynamic_classes is None else config.dynamic_classes
    return build_pool(
        frames,
        current,
        config.m_aux,
        scene.rig,
        scene.bounds,
        config=config,
        dynamic_classes=dynamic,
        num_classes=scene.num_classes,
    )


# ---------------------------------------------------------------------------#
# 重み
# ---------------------------------------------------------------------------#
def balance_weights(labels: np.ndarray, class_counts: np.ndarray, lambda_s: float, w_max: float) -> np.ndarray:
    counts = np.asarray(class_counts, dtype=np.float64)
    n = counts[np.asarray(labels, dtype=np.int64)]
    if np.any(n < 1):
        raise InputError("プールに存在しないクラスのレイです")
    exponent = lambda_s * (counts.max() / n - 1.0)
    # exp のオーバーフローを避けて先に上限で切る
    return np.clip(np.exp(np.minimum(exponent, math.log(w_max))), 1.0, w_max)


def balance_weight(pool: RayPool, ray: Ray) -> float:
    return float(
        balance_weights(np.array([ray.sem_label]), pool.class_counts, pool.config.lambda_s, pool.config.w_max)[0]
    )


def temporal_weights(
    frame_offset: np.ndarray, labels: np.ndarray, config: RayPoolConfig, dynamic_classes: Sequence[int]
) -> np.ndarray:
    dynamic = np.isin(labels, np.asarray(list(dynamic_classes), dtype=np.int64))
    aux = np.where(dynamic, config.lambda_dyn, config.lambda_adj)
    return np.where(np.asarray(frame_offset) == 0, 1.0, aux)


def temporal_weight(ray: Ray, config: RayPoolConfig, dynamic_classes: Sequence[int] = ()) -> float:
    return float(temporal_weights(np.array([ray.frame_offset]), np.array([ray.sem_label]), config, dynamic_classes)[0])


def assign_weights(pool: RayPool) -> None:
    """balance / temporal / weights をプールの設定から計算し直す。"""
    cfg = pool.config
    pool.balance = balance_weights(pool.rays.sem_label, pool.class_counts, cfg.lambda_s, cfg.w_max)
    pool.temporal = temporal_weights(pool.rays.frame_offset, pool.rays.sem_label, cfg, pool.dynamic_classes)
    pool.weights = pool.balance * pool.temporal
    pool.rays.weight = pool.weights.copy()
    clamped = int(np.sum(pool.balance >= cfg.w_max))
    if clamped:
        LOG.info("W_b が上限 %.1f に達したレイ: %d", cfg.w_max, clamped)


# ---------------------------------------------------------------------------#
# サンプリング
# ---------------------------------------------------------------------------#
def sample_indices(pool: RayPool, n: int, rng: np.random.Generator) -> np.ndarray:
    """
    プールから n 本の添字を引く。

    weighted なら W に比例（復元抽出は累積和の二分探索で W = 0 のレイを決して引かない）、
    そうでなければ一様。非復元抽出で n がプールを超える場合は n を切り詰める。
    """
    if n < 1:
        raise InputError(f"n は 1 以上が必要です: {n}")
    size = len(pool)
    if size == 0:
        raise InputError("空のプールからは抽出できません")
    cfg = pool.config
    if not cfg.weighted:
        if cfg.with_replacement:
            return rng.integers(0, size, n)
        if n > size:
            LOG.warning("非復元抽出: n=%d をプールサイズ %d に切り詰めます", n, size)
            n = size
        return rng.permutation(size)[:n]

    w = np.asarray(pool.weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InputError("重みは非負の有限値である必要があります")
    positive = np.flatnonzero(w > 0)
    if len(positive) == 0:
        raise InputError("正の重みを持つレイがありません")
    if cfg.with_replacement:
        cdf = np.cumsum(w)
        u = rng.random(n) * cdf[-1]
        idx = np.searchsorted(cdf, u, side="right")
        return np.minimum(idx, positive[-1])
    if n > len(positive):
        LOG.warning("非復元抽出: n=%d を正の重みのレイ数 %d に切り詰めます", n, len(positive))
        n = len(positive)
    return rng.choice(size, size=n, replace=False, p=w / w.sum())


def sample_batch(pool: RayPool, n: int, rng: np.random.Generator) -> RayBatch:
    """sample_indices で引いたレイのバッチ。順序は抽出順。"""
    return pool.rays.take(sample_indices(pool, n, rng))
