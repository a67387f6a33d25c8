"""
total_loss のフィールドパラメータに対する解析的な逆伝播と、差分による検証。

連鎖の順序:
    損失 → (sem_pix, depth_pix, w_k) → (S_k, τ_k = σ_k β_k) → σ_k → 補間前密度
    → 8 角への三線形重み → density_params / semantic_params

∂w_k/∂τ_j は j = k で T_{k+1}、j < k で −w_k になる。したがって
    ∂L/∂τ_j = G_j T_{j+1} − Σ_{k>j} G_k w_k     (G_k = ∂L/∂w_k)

ブロックごとに専用バッファへ np.bincount で集約し、ブロック順に足し合わせる。
サンプル位置（階層サンプリングの細サンプル含む）は定数として扱う。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from common.errors import InputError
from common.geometry import RayBatch, intersect_box
from common.losses import LossReport, RayTerms, occ3d_terms, ray_terms, total_loss
from common.renderer import RenderBlock, RenderResult, clip_to_field, render_rays, render_samples
from common.runtime.config import LossConfig, RendererConfig
from common.runtime.workers import BlockExecutor
from common.samplers import create_sampler
from common.sdf import OccupancyGrid, SemanticDensityField, softplus_grad

__all__ = [
    "GradBuffer",
    "FDReport",
    "backward",
    "loss_and_grad",
    "compare_gradients",
    "numeric_gradient",
    "fd_check",
    "make_check_problem",
]

LOG = logging.getLogger(__name__)

REL_TOL = 1e-4
ABS_TOL = 1e-7
SMALL = 1e-6


@dataclass
class GradBuffer:
    d_density: np.ndarray
    d_semantic: np.ndarray
    contributing_ray_count: int = 0

    @classmethod
    def zeros_like(cls, field: SemanticDensityField) -> "GradBuffer":
        return cls(np.zeros(field.dims), np.zeros(field.dims + (field.num_classes,)), 0)

    def flat(self) -> np.ndarray:
        """flat_params と同じ並び（密度 → 意味ロジット）。"""
        return np.concatenate([self.d_density.reshape(-1), self.d_semantic.reshape(-1)])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.d_density)) and np.all(np.isfinite(self.d_semantic)))

    def equals(self, other: "GradBuffer") -> bool:
        return bool(
            np.array_equal(self.d_density, other.d_density)
            and np.array_equal(self.d_semantic, other.d_semantic)
        )


# ---------------------------------------------------------------------------#
# 逆伝播
# ---------------------------------------------------------------------------#
def _upstream(
    block: RenderBlock,
    offset: int,
    terms: RayTerms,
    config: LossConfig,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ブロック内各レイの ∂L/∂sem_pix, ∂L/∂depth_pix, ∂L/∂w_k（distortion 分）。"""
    n = len(block)
    sl = slice(offset, offset + n)
    labels = block.rays.sem_label
    g_sem = np.zeros_like(block.sem_pix)
    seg_mask = terms.seg_mask[sl]
    if terms.n_seg and config.w_seg and np.any(seg_mask):
        scale = config.w_seg / terms.n_seg
        rows = np.flatnonzero(seg_mask)
        if block.accumulation == "probs":
            picked = block.sem_pix[rows, labels[rows]]
            g_sem[rows, labels[rows]] = -scale / (picked + 1e-10)
        else:
            p = softmax(block.sem_pix[rows], axis=-1)
            p[np.arange(len(rows)), labels[rows]] -= 1.0
            g_sem[rows] = scale * p

    g_depth = np.zeros(n)
    depth_mask = terms.depth_mask[sl]
    if terms.n_depth and config.w_depth and np.any(depth_mask):
        m = terms.n_depth
        d = terms.log_residual[sl][depth_mask]
        mean = terms.mean_residual()
        g_d = 2.0 * d / m - 2.0 * config.lambda_var * mean / m
        g_depth[depth_mask] = config.w_depth * g_d / block.depth_pix[depth_mask]

    g_w_dist = np.zeros_like(block.weights)
    if config.w_dist and block.weights.shape[1]:
        mask = block.samples.mask
        w = np.where(mask, block.weights, 0.0)
        mid = block.samples.midpoints
        delta = np.where(mask, block.samples.delta, 0.0)
        wm = w * mid
        w_cum = np.cumsum(w, axis=1)
        s_cum = np.cumsum(wm, axis=1)
        w_total = w_cum[:, -1:]
        s_total = s_cum[:, -1:]
        w_before = w_cum - w
        s_before = s_cum - wm
        w_after = w_total - w_cum
        s_after = s_total - s_cum
        g = 2.0 * (mid * w_before - s_before) + 2.0 * (s_after - mid * w_after) + (2.0 / 3.0) * w * delta
        g_w_dist = (config.w_dist / terms.n_rays) * np.where(mask, g, 0.0)
    return g_sem, g_depth, g_w_dist


def _block_backward(
    block: RenderBlock,
    offset: int,
    terms: RayTerms,
    field: SemanticDensityField,
    config: LossConfig,
) -> Tuple[np.ndarray, np.ndarray]:
    n_vox = field.voxel_count
    num_classes = field.num_classes
    d_rho = np.zeros(n_vox)
    d_sem = np.zeros(n_vox * num_classes)
    if len(block) == 0 or block.weights.shape[1] == 0:
        return d_rho, d_sem

    g_sem, g_depth, g_w = _upstream(block, offset, terms, config)
    mask = block.samples.mask
    w = block.weights

    # 意味: sem_pix = Σ w_k S_k  (probs では S_k を softmax(S_k) に置き換える)
    if block.accumulation == "probs":
        probs = block.probs if block.probs is not None else softmax(block.sem_logits, axis=-1)
        g_w = g_w + np.einsum("nl,nkl->nk", g_sem, probs)
        g_p = w[..., None] * g_sem[:, None, :]
        inner = np.sum(g_p * probs, axis=-1, keepdims=True)
        g_logits = probs * (g_p - inner)
    else:
        g_w = g_w + np.einsum("nl,nkl->nk", g_sem, block.sem_logits)
        g_logits = w[..., None] * g_sem[:, None, :]
    # 深度: depth_pix = Σ w_k z_k
    g_w = g_w + g_depth[:, None] * block.samples.t
    g_w = np.where(mask, g_w, 0.0)

    gw_w = g_w * w
    suffix = np.cumsum(gw_w[:, ::-1], axis=1)[:, ::-1]
    after = np.concatenate([suffix[:, 1:], np.zeros((len(block), 1))], axis=1)
    trans_next = block.trans * (1.0 - block.alpha)
    g_tau = g_w * trans_next - after
    delta = np.where(mask, block.samples.delta, 0.0)
    g_rho = g_tau * delta * softplus_grad(block.density_pre)
    g_rho = np.where(mask, g_rho, 0.0)
    g_logits = np.where(mask[..., None], g_logits, 0.0)

    idx = block.corner_index.reshape(-1, 8)
    cw = block.corner_weight.reshape(-1, 8)
    d_rho += np.bincount(idx.reshape(-1), weights=(g_rho.reshape(-1, 1) * cw).reshape(-1), minlength=n_vox)
    sem_idx = idx[..., None] * num_classes + np.arange(num_classes)
    sem_val = cw[..., None] * g_logits.reshape(-1, 1, num_classes)
    d_sem += np.bincount(sem_idx.reshape(-1), weights=sem_val.reshape(-1), minlength=n_vox * num_classes)
    return d_rho, d_sem


def _check_intermediates(result: RenderResult) -> None:
    for i, block in enumerate(result.blocks):
        for name in ("trans", "alpha", "weights", "corner_index", "corner_weight", "density_pre"):
            if getattr(block, name, None) is None:
                raise InputError(f"block {i}: 逆伝播に必要な中間量 {name} がありません")


def backward(
    result: RenderResult,
    field: SemanticDensityField,
    config: Optional[LossConfig] = None,
    *,
    gt_grid: Optional[OccupancyGrid] = None,
    terms: Optional[RayTerms] = None,
    executor: Optional[BlockExecutor] = None,
) -> GradBuffer:
    """total_loss の解析勾配。ブロックごとのバッファをブロック順に合算する。"""
    config = config or LossConfig()
    _check_intermediates(result)
    terms = terms or ray_terms(result, config)

    offsets = np.concatenate([[0], np.cumsum([len(b) for b in result.blocks])]).astype(int)
    executor = executor or BlockExecutor(1)
    parts = executor.map_items(
        _block_backward,
        [(b, int(offsets[i]), terms, field, config) for i, b in enumerate(result.blocks)],
    )

    d_rho = np.zeros(field.voxel_count)
    d_sem = np.zeros(field.voxel_count * field.num_classes)
    for part_rho, part_sem in parts:
        d_rho += part_rho
        d_sem += part_sem
    d_rho = d_rho.reshape(field.dims)
    d_sem = d_sem.reshape(field.dims + (field.num_classes,))

    if config.w_tv:
        rho = field.density_params
        pairs = sum(np.diff(rho, axis=a).size for a in range(3))
        if pairs:
            for axis in range(3):
                diff = np.diff(rho, axis=axis)
                g = (2.0 * config.w_tv / pairs) * diff
                hi = [slice(None)] * 3
                lo = [slice(None)] * 3
                hi[axis] = slice(1, None)
                lo[axis] = slice(None, -1)
                d_rho[tuple(hi)] += g
                d_rho[tuple(lo)] -= g

    if config.w_occ3d:
        if gt_grid is None:
            raise InputError("w_occ3d > 0 には GT 占有グリッドが必要です")
        a, opacity, occupied, _, _, labels = occ3d_terms(field, gt_grid)
        n_vox = occupied.size
        n_occ = int(occupied.sum())
        # ∂bce/∂a: 占有なら −exp(−a)/(o + ε)、空なら 1
        g_a = np.where(occupied, -np.exp(-a) / (opacity + 1e-10), 1.0) / n_vox
        d_rho += config.w_occ3d * g_a * field.voxel_size * softplus_grad(field.density_params)
        if n_occ:
            p = softmax(field.semantic_params, axis=-1)
            onehot = np.zeros_like(p)
            np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
            d_sem += config.w_occ3d * np.where(occupied[..., None], p - onehot, 0.0) / n_occ

    return GradBuffer(d_rho, d_sem, contributing_ray_count=terms.n_rays)


def loss_and_grad(
    field: SemanticDensityField,
    rays: RayBatch,
    loss_config: LossConfig,
    renderer_config: RendererConfig,
    *,
    seed: int = 0,
    iteration: int = 0,
    training: bool = True,
    executor: Optional[BlockExecutor] = None,
    gt_grid: Optional[OccupancyGrid] = None,
) -> Tuple[LossReport, GradBuffer, RenderResult]:
    """レンダリング → 損失 → 逆伝播をまとめて行う。rays はボックスで切り詰め済みであること。"""
    result = render_rays(
        field, rays, renderer_config, seed=seed, iteration=iteration, training=training, executor=executor
    )
    terms = ray_terms(result, loss_config)
    report = total_loss(result, field, loss_config, gt_grid=gt_grid, terms=terms)
    grads = backward(result, field, loss_config, gt_grid=gt_grid, terms=terms, executor=executor)
    return report, grads, result


# ---------------------------------------------------------------------------#
# 差分検証
# ---------------------------------------------------------------------------#
@dataclass
class FDReport:
    max_rel_error: float
    max_abs_error: float
    worst_index: int
    offending: List[int]
    checked: int
    h: float
    analytic: np.ndarray = dc_field(repr=False)
    numeric: np.ndarray = dc_field(repr=False)

    @property
    def passed(self) -> bool:
        return not self.offending

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "max_abs_error": self.max_abs_error,
            "worst_index": self.worst_index,
            "offending": self.offending,
            "checked": self.checked,
            "h": self.h,
            "passed": self.passed,
        }


def compare_gradients(
    analytic: np.ndarray,
    numeric: np.ndarray,
    *,
    h: float = 1e-4,
    rel_tol: float = REL_TOL,
    abs_tol: float = ABS_TOL,
) -> FDReport:
    """
    相対誤差 |a − n| / max(|a|, |n|) で比較する。

    両方の大きさが 1e-6 未満の成分は絶対誤差 abs_tol で判定する。
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    err = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    small = scale < SMALL
    rel = np.where(small, 0.0, err / np.where(small, 1.0, scale))
    bad = np.where(small, err > abs_tol, rel > rel_tol)
    worst = int(np.argmax(np.where(small, 0.0, rel))) if len(rel) else -1
    return FDReport(
        max_rel_error=float(rel.max()) if len(rel) else 0.0,
        max_abs_error=float(np.where(small, err, 0.0).max()) if len(err) else 0.0,
        worst_index=worst,
        offending=[int(i) for i in np.flatnonzero(bad)],
        checked=len(a),
        h=h,
        analytic=a,
        numeric=n,
    )


def numeric_gradient(
    loss_fn: Callable[[np.ndarray], float],
    theta: np.ndarray,
    h: float,
    indices: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """中心差分 (L(θ+h) − L(θ−h)) / 2h。indices 以外の成分は 0。"""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for i in range(len(theta)) if indices is None else indices:
        plus = theta.copy()
        minus = theta.copy()
        plus[i] += h
        minus[i] -= h
        grad[i] = (loss_fn(plus) - loss_fn(minus)) / (2.0 * h)
    return grad


def fd_check(
    field: SemanticDensityField,
    rays: RayBatch,
    loss_config: Optional[LossConfig] = None,
    h: float = 1e-4,
    *,
    renderer_config: Optional[RendererConfig] = None,
    gt_grid: Optional[OccupancyGrid] = None,
    rel_tol: float = REL_TOL,
    abs_tol: float = ABS_TOL,
) -> FDReport:
    """
    全パラメータについて解析勾配と中心差分を比べる（シングルスレッド）。

    サンプルはジッタ無しで一度だけ生成し、差分評価中は固定する。
    """
    loss_config = loss_config or LossConfig()
    renderer_config = renderer_config or RendererConfig()
    clipped, hit = clip_to_field(field, rays)
    if not np.any(hit):
        raise InputError("フィールドに当たるレイがありません")
    sampler = create_sampler(renderer_config.as_dict())
    samples = sampler.sample(field, clipped, None, training=False)

    def _render(f: SemanticDensityField) -> RenderResult:
        block = render_samples(
            f,
            clipped,
            samples,
            interpolation=renderer_config.interpolation,
            accumulation=renderer_config.sem_accumulation,
        )
        return RenderResult([block])

    base = _render(field)
    analytic = backward(base, field, loss_config, gt_grid=gt_grid).flat()

    probe = field.copy()

    def _loss(theta: np.ndarray) -> float:
        probe.set_flat_params(theta)
        return total_loss(_render(probe), probe, loss_config, gt_grid=gt_grid).total

    numeric = numeric_gradient(_loss, field.flat_params(), h)
    report = compare_gradients(analytic, numeric, h=h, rel_tol=rel_tol, abs_tol=abs_tol)
    LOG.info(
        "fd_check: params=%d max_rel=%.3e max_abs=%.3e offending=%d",
        report.checked,
        report.max_rel_error,
        report.max_abs_error,
        len(report.offending),
    )
    return report


def make_check_problem(
    seed: int = 0,
    *,
    dims: Tuple[int, int, int] = (4, 4, 4),
    num_classes: int = 5,
    n_rays: int = 8,
    voxel_size: float = 1.0,
    with_gt: bool = True,
) -> Tuple[SemanticDensityField, RayBatch, Optional[OccupancyGrid]]:
    """
    勾配検証用の小さな問題を乱数から作る。

    パラメータは N(0, 1)、レイはボックス外周の点から内部の点へ向かい、
    深度ラベルは実際の交差区間内に置く。
    """
    rng = np.random.default_rng(seed)
    dims = tuple(int(v) for v in dims)  # type: ignore[assignment]
    field = SemanticDensityField(
        dims=dims,
        num_classes=num_classes,
        origin=np.zeros(3),
        voxel_size=voxel_size,
        density_params=rng.normal(0.0, 1.0, dims),
        semantic_params=rng.normal(0.0, 1.0, dims + (num_classes,)),
    )
    extent = np.asarray(dims, dtype=np.float64) * voxel_size
    center = extent / 2.0
    origins = np.empty((n_rays, 3))
    dirs = np.empty((n_rays, 3))
    for i in range(n_rays):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        origins[i] = center + u * float(np.linalg.norm(extent))
        target = rng.uniform(0.2, 0.8, 3) * extent
        d = target - origins[i]
        dirs[i] = d / np.linalg.norm(d)
    t0, t1, _ = intersect_box(origins, dirs, np.zeros(n_rays), np.full(n_rays, np.inf), field.bounds)
    depth = t0 + rng.uniform(0.3, 0.7, n_rays) * (t1 - t0)
    rays = RayBatch(
        origins=origins,
        directions=dirs,
        t_near=np.zeros(n_rays),
        t_far=np.full(n_rays, np.inf),
        frame_offset=np.zeros(n_rays, dtype=np.int64),
        sem_label=rng.integers(0, num_classes, n_rays),
        depth_label=depth,
    )
    gt = None
    if with_gt:
        labels = rng.integers(0, num_classes + 1, dims)
        gt = OccupancyGrid(dims, labels, num_classes)  # type: ignore[arg-type]
    return field, rays, gt
