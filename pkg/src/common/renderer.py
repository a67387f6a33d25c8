"""
ボリュームレンダリング（意味ロジットと深度の累積）。

    α_k = 1 − exp(−σ_k β_k)
    T_k = exp(−Σ_{t<k} σ_t β_t)
    w_k = T_k α_k
    S^pix = Σ w_k S_k,  D^pix = Σ w_k z_k,  opacity = Σ w_k

サンプル軸の総和は累積和の末尾で取る。逐次加算なのでパディングの有無やブロック
分割に依存せず、同じレイは常に同じビット列の結果になる。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.special import softmax

from common.errors import InputError
from common.geometry import Ray, RayBatch, intersect_box
from common.runtime.config import RendererConfig
from common.runtime.workers import BlockExecutor, block_rng
from common.samplers import PointSampler, SampleBatch, SampleSet, composite_weights, create_sampler
from common.sdf import BOUNDS_TOL, SemanticDensityField, query_points

__all__ = [
    "RenderOutput",
    "SampleRecord",
    "RenderBlock",
    "RenderResult",
    "RayRenderError",
    "ordered_sum",
    "clip_to_field",
    "render_samples",
    "render_ray",
    "render_rays",
    "render_batch",
]

LOG = logging.getLogger(__name__)

ACCUMULATIONS = ("logits", "probs")


class RayRenderError(InputError):
    """レイ単位のレンダリング失敗。ray_index はバッチ内の番号。"""

    def __init__(self, ray_index: int, message: str) -> None:
        self.ray_index = ray_index
        super().__init__(f"ray {ray_index}: {message}")


def ordered_sum(x: np.ndarray, axis: int = 1) -> np.ndarray:
    """先頭から順に足し合わせた総和（累積和の末尾）。"""
    if x.shape[axis] == 0:
        return np.zeros(x.shape[:axis] + x.shape[axis + 1 :])
    return np.take(np.cumsum(x, axis=axis), -1, axis=axis)


@dataclass
class SampleRecord:
    """逆伝播用に保持するサンプルごとの中間量。"""

    t: np.ndarray
    delta: np.ndarray
    trans: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    density_pre: np.ndarray
    sem_logits: np.ndarray
    corner_index: np.ndarray
    corner_weight: np.ndarray


@dataclass
class RenderOutput:
    sem_pix: np.ndarray
    depth_pix: float
    opacity: float
    per_sample: Optional[SampleRecord] = None

    @property
    def weights(self) -> np.ndarray:
        if self.per_sample is None:
            return np.zeros(0)
        return self.per_sample.trans * self.per_sample.alpha


@dataclass
class RenderBlock:
    """
    ブロック内 N 本のレイのレンダリング結果。配列は (N, K[, ...]) にパディング済み。

    rays / samples は逆伝播・損失計算でそのまま再利用する。
    """

    rays: RayBatch
    samples: SampleBatch
    sigma: np.ndarray
    density_pre: np.ndarray
    sem_logits: np.ndarray
    corner_index: np.ndarray
    corner_weight: np.ndarray
    trans: np.ndarray
    alpha: np.ndarray
    weights: np.ndarray
    sem_pix: np.ndarray
    depth_pix: np.ndarray
    opacity: np.ndarray
    accumulation: str = "logits"
    probs: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.rays)

    def output(self, i: int) -> RenderOutput:
        m = self.samples.mask[i]
        record = SampleRecord(
            t=self.samples.t[i, m],
            delta=self.samples.delta[i, m],
            trans=self.trans[i, m],
            alpha=self.alpha[i, m],
            sigma=self.sigma[i, m],
            density_pre=self.density_pre[i, m],
            sem_logits=self.sem_logits[i, m],
            corner_index=self.corner_index[i, m],
            corner_weight=self.corner_weight[i, m],
        )
        return RenderOutput(
            sem_pix=self.sem_pix[i].copy(),
            depth_pix=float(self.depth_pix[i]),
            opacity=float(self.opacity[i]),
            per_sample=record,
        )


@dataclass
class RenderResult:
    """ブロック順に並んだ RenderBlock の集合。"""

    blocks: List[RenderBlock] = dc_field(default_factory=list)

    def __len__(self) -> int:
        return sum(len(b) for b in self.blocks)

    def _cat(self, name: str) -> np.ndarray:
        parts = [getattr(b, name) for b in self.blocks]
        return np.concatenate(parts) if parts else np.zeros(0)

    @property
    def sem_pix(self) -> np.ndarray:
        return self._cat("sem_pix")

    @property
    def depth_pix(self) -> np.ndarray:
        return self._cat("depth_pix")

    @property
    def opacity(self) -> np.ndarray:
        return self._cat("opacity")

    @property
    def rays(self) -> RayBatch:
        return RayBatch.concat([b.rays for b in self.blocks])

    @property
    def accumulation(self) -> str:
        return self.blocks[0].accumulation if self.blocks else "logits"

    def outputs(self) -> List[RenderOutput]:
        return [b.output(i) for b in self.blocks for i in range(len(b))]


def clip_to_field(field: SemanticDensityField, rays: RayBatch) -> tuple:
    """レイをフィールドのボックスで切り詰める。戻り値は (切り詰め後のレイ, hit マスク)。"""
    t0, t1, hit = intersect_box(rays.origins, rays.directions, rays.t_near, rays.t_far, field.bounds)
    clipped = rays.take(hit)
    clipped.t_near = t0[hit]
    clipped.t_far = t1[hit]
    return clipped, hit


def render_samples(
    field: SemanticDensityField,
    rays: RayBatch,
    samples: SampleBatch,
    *,
    interpolation: str = "trilinear",
    accumulation: str = "logits",
    ray_offset: int = 0,
) -> RenderBlock:
    """与えられたサンプル位置でボリュームレンダリングを行う。"""
    if accumulation not in ACCUMULATIONS:
        raise InputError(f"未対応の累積方式です: {accumulation}")
    n, k = samples.t.shape if samples.t.ndim == 2 else (len(rays), 0)
    num_classes = field.num_classes
    if k == 0:
        zeros = np.zeros((n, 0))
        return RenderBlock(
            rays=rays,
            samples=samples,
            sigma=zeros,
            density_pre=zeros,
            sem_logits=np.zeros((n, 0, num_classes)),
            corner_index=np.zeros((n, 0, 8), dtype=np.int64),
            corner_weight=np.zeros((n, 0, 8)),
            trans=zeros,
            alpha=zeros,
            weights=zeros,
            sem_pix=np.zeros((n, num_classes)),
            depth_pix=np.zeros(n),
            opacity=np.zeros(n),
            accumulation=accumulation,
        )

    pts = rays.origins[:, None, :] + samples.t[..., None] * rays.directions[:, None, :]
    inside = field.bounds.contains(pts, tol=BOUNDS_TOL * field.voxel_size)
    if not np.all(inside):
        bad = int(np.flatnonzero(~np.all(inside, axis=1))[0])
        raise RayRenderError(ray_offset + bad, "サンプル点がフィールドの範囲外です")

    q = query_points(field, pts.reshape(-1, 3), interpolation=interpolation)
    sigma = q.sigma.reshape(n, k)
    density_pre = q.density_pre.reshape(n, k)
    sem_logits = q.sem_logits.reshape(n, k, num_classes)
    # 詰め物は β=0 扱い
    delta = np.where(samples.mask, samples.delta, 0.0)
    trans, alpha, weights = composite_weights(sigma, delta)

    probs = None
    if accumulation == "probs":
        probs = softmax(sem_logits, axis=-1)
        sem_pix = ordered_sum(weights[..., None] * probs, axis=1)
    else:
        sem_pix = ordered_sum(weights[..., None] * sem_logits, axis=1)
    depth_pix = ordered_sum(weights * samples.t, axis=1)
    opacity = ordered_sum(weights, axis=1)

    return RenderBlock(
        rays=rays,
        samples=samples,
        sigma=sigma,
        density_pre=density_pre,
        sem_logits=sem_logits,
        corner_index=q.corner_index.reshape(n, k, 8),
        corner_weight=q.corner_weight.reshape(n, k, 8),
        trans=trans,
        alpha=alpha,
        weights=weights,
        sem_pix=sem_pix,
        depth_pix=depth_pix,
        opacity=opacity,
        accumulation=accumulation,
        probs=probs,
    )


def render_ray(
    field: SemanticDensityField,
    ray: Ray,
    samples: SampleSet,
    *,
    interpolation: str = "trilinear",
    accumulation: str = "logits",
) -> RenderOutput:
    """単一レイのレンダリング。空の SampleSet は不透明度 0 のゼロ出力。"""
    if len(samples) == 0:
        return RenderOutput(
            sem_pix=np.zeros(field.num_classes),
            depth_pix=0.0,
            opacity=0.0,
            per_sample=SampleRecord(
                t=np.zeros(0),
                delta=np.zeros(0),
                trans=np.zeros(0),
                alpha=np.zeros(0),
                sigma=np.zeros(0),
                density_pre=np.zeros(0),
                sem_logits=np.zeros((0, field.num_classes)),
                corner_index=np.zeros((0, 8), dtype=np.int64),
                corner_weight=np.zeros((0, 8)),
            ),
        )
    block = render_samples(
        field,
        RayBatch.from_rays([ray]),
        SampleBatch.from_sets([samples]),
        interpolation=interpolation,
        accumulation=accumulation,
    )
    return block.output(0)


def render_rays(
    field: SemanticDensityField,
    rays: RayBatch,
    config: RendererConfig,
    *,
    seed: int = 0,
    iteration: int = 0,
    training: bool = False,
    executor: Optional[BlockExecutor] = None,
    sampler: Optional[PointSampler] = None,
) -> RenderResult:
    """
    ボックス内に切り詰め済みのレイをブロック単位でレンダリングする。

    ブロック b の乱数は (seed, iteration, b) から派生する。
    """
    sampler = sampler or create_sampler(config.as_dict())
    executor = executor or BlockExecutor(1, config.block_size)

    def _block(index: int, sl: slice) -> RenderBlock:
        sub = rays.take(sl)
        rng = block_rng(seed, iteration, index) if training else None
        samples = sampler.sample(field, sub, rng, training=training)
        return render_samples(
            field,
            sub,
            samples,
            interpolation=config.interpolation,
            accumulation=config.sem_accumulation,
            ray_offset=sl.start,
        )

    blocks = executor.map(_block, len(rays))
    LOG.debug("render_rays: rays=%d blocks=%d training=%s", len(rays), len(blocks), training)
    return RenderResult(blocks)


def render_batch(
    field: SemanticDensityField,
    rays: Union[Sequence[Ray], RayBatch],
    config: Optional[RendererConfig] = None,
    *,
    seed: int = 0,
    iteration: int = 0,
    training: bool = False,
    workers: int = 1,
) -> List[RenderOutput]:
    """
    レイ列をレンダリングし、入力と同じ順序の RenderOutput を返す。

    フィールドのボックスに当たらないレイは不透明度 0 のゼロ出力になる。
    """
    config = config or RendererConfig()
    batch = rays if isinstance(rays, RayBatch) else RayBatch.from_rays(rays)
    clipped, hit = clip_to_field(field, batch)
    with BlockExecutor(workers, config.block_size) as executor:
        result = render_rays(
            field, clipped, config, seed=seed, iteration=iteration, training=training, executor=executor
        )
    hit_outputs = iter(result.outputs())
    return [
        next(hit_outputs) if h else RenderOutput(np.zeros(field.num_classes), 0.0, 0.0) for h in hit
    ]
