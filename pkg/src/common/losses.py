"""
教師項: 意味 cross-entropy、SILog 深度、distortion 正則化、TV 正則化、
および参照フレームの GT グリッドを使う 3D 占有項。

バッチ全体の平均はレイ順（ブロック順）の逐次和で取る。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.special import log_softmax

from common.errors import InputError
from common.renderer import RenderBlock, RenderResult, ordered_sum
from common.runtime.config import LossConfig
from common.samplers import SampleSet
from common.sdf import OccupancyGrid, SemanticDensityField

__all__ = [
    "LossReport",
    "RayTerms",
    "seg_loss",
    "depth_loss",
    "distortion_loss",
    "tv_loss",
    "occ3d_loss",
    "occ3d_terms",
    "ray_terms",
    "total_loss",
]

LOG = logging.getLogger(__name__)

PROB_EPS = 1e-10


@dataclass
class LossReport:
    l_seg: float = 0.0
    l_depth: float = 0.0
    l_dist: float = 0.0
    l_tv: float = 0.0
    l_occ3d: float = 0.0
    total: float = 0.0
    counts: Dict[str, int] = dc_field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "l_seg": self.l_seg,
            "l_depth": self.l_depth,
            "l_dist": self.l_dist,
            "l_tv": self.l_tv,
            "l_occ3d": self.l_occ3d,
            "total": self.total,
            "counts": dict(self.counts),
        }

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite([self.l_seg, self.l_depth, self.l_dist, self.l_tv, self.l_occ3d, self.total]))
        )


# ---------------------------------------------------------------------------#
# 単体の損失関数
# ---------------------------------------------------------------------------#
def _seg_rows(sem_pix: np.ndarray, labels: np.ndarray, accumulation: str) -> np.ndarray:
    rows = np.arange(len(labels))
    if accumulation == "probs":
        return -np.log(sem_pix[rows, labels] + PROB_EPS)
    return -log_softmax(sem_pix, axis=-1)[rows, labels]


def seg_loss(sem_pix: Sequence[float], label: int, *, accumulation: str = "logits") -> float:
    """−log softmax(sem_pix)[label]。probs 累積では −log(sem_pix[label] + ε)。"""
    s = np.asarray(sem_pix, dtype=np.float64).reshape(1, -1)
    if not 0 <= label < s.shape[1]:
        raise InputError(f"ラベルが範囲外です: {label} (L={s.shape[1]})")
    return float(_seg_rows(s, np.array([label]), accumulation)[0])


def _silog(pred: np.ndarray, gt: np.ndarray, lambda_var: float) -> float:
    d = np.log(pred) - np.log(gt)
    n = len(d)
    mean = ordered_sum(d, axis=0) / n
    return float(ordered_sum(d * d, axis=0) / n - lambda_var * mean * mean)


def depth_loss(pred: Sequence[float], gt: Sequence[float], lambda_var: float = 0.85) -> float:
    """SILog: (1/n)Σd² − λ((1/n)Σd)²、d = ln pred − ln gt。"""
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    g = np.asarray(gt, dtype=np.float64).reshape(-1)
    if len(p) != len(g):
        raise InputError(f"pred と gt の長さが一致しません: {len(p)} != {len(g)}")
    if len(p) == 0:
        raise InputError("深度が 1 つもありません")
    if np.any(p <= 0) or np.any(g <= 0):
        raise InputError("深度は正である必要があります（無効なレイは呼び出し側でマスクしてください）")
    return _silog(p, g, lambda_var)


def _distortion_rows(mid: np.ndarray, delta: np.ndarray, w: np.ndarray) -> np.ndarray:
    """
    Σ_ij w_i w_j |m_i − m_j| + (1/3)Σ w_i² β_i を行ごとに返す。

    m は昇順なので対の項は 2 Σ_i w_i (m_i W_{<i} − S_{<i}) で求まる。
    """
    if w.shape[1] == 0:
        return np.zeros(len(w))
    wm = w * mid
    w_before = np.cumsum(w, axis=1) - w
    s_before = np.cumsum(wm, axis=1) - wm
    pair = 2.0 * ordered_sum(w * (mid * w_before - s_before), axis=1)
    return pair + ordered_sum(w * w * delta, axis=1) / 3.0


def distortion_loss(samples: SampleSet, weights: Sequence[float]) -> float:
    w = np.asarray(weights, dtype=np.float64).reshape(1, -1)
    if w.shape[1] != len(samples):
        raise InputError("weights の長さがサンプル数と一致しません")
    return float(_distortion_rows(samples.midpoints[None], samples.deltas[None], w)[0])


def tv_loss(field: SemanticDensityField) -> float:
    """隣接ボクセル対の密度パラメータ（活性化前）差の二乗平均。"""
    rho = field.density_params
    total = 0.0
    pairs = 0
    for axis in range(3):
        diff = np.diff(rho, axis=axis)
        total += float(np.sum(diff * diff))
        pairs += diff.size
    return total / pairs if pairs else 0.0


def occ3d_terms(field: SemanticDensityField, gt: OccupancyGrid):
    if tuple(gt.dims) != tuple(field.dims):
        raise InputError(f"GT グリッドの dims が一致しません: {gt.dims} != {field.dims}")
    a = field.sigma() * field.voxel_size
    occupied = gt.occupied()
    opacity = -np.expm1(-a)
    # y=1: −log(o + ε), y=0: −log(1 − o) = a
    bce = np.where(occupied, -np.log(opacity + PROB_EPS), a)
    labels = np.where(occupied, gt.labels, 0)
    if np.any(labels >= field.num_classes):
        raise InputError("GT ラベルがフィールドのクラス数を超えています")
    logp = log_softmax(field.semantic_params, axis=-1)
    ce = -np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    return a, opacity, occupied, bce, ce, labels


def occ3d_loss(field: SemanticDensityField, gt: OccupancyGrid) -> float:
    """ボクセル不透明度 1 − exp(−σ·voxel_size) の BCE と、占有ボクセル上の CE。"""
    _, _, occupied, bce, ce, _ = occ3d_terms(field, gt)
    n_occ = int(occupied.sum())
    l_bce = float(np.sum(bce)) / bce.size
    l_ce = float(np.sum(ce[occupied])) / n_occ if n_occ else 0.0
    return l_bce + l_ce


# ---------------------------------------------------------------------------#
# バッチ
# ---------------------------------------------------------------------------#
@dataclass
class RayTerms:
    """レイごとの損失項（ブロック順に連結）。勾配計算でも共有する。"""

    seg: np.ndarray
    seg_mask: np.ndarray
    log_residual: np.ndarray
    depth_mask: np.ndarray
    dist: np.ndarray
    accumulation: str

    @property
    def n_seg(self) -> int:
        return int(self.seg_mask.sum())

    @property
    def n_depth(self) -> int:
        return int(self.depth_mask.sum())

    @property
    def n_rays(self) -> int:
        return len(self.dist)

    def mean_residual(self) -> float:
        if self.n_depth == 0:
            return 0.0
        return float(ordered_sum(self.log_residual[self.depth_mask], axis=0) / self.n_depth)


def _block_terms(block: RenderBlock, config: LossConfig):
    rays = block.rays
    n = len(rays)
    labels = rays.sem_label
    seg_mask = labels >= 0
    seg = np.zeros(n)
    if np.any(seg_mask):
        seg[seg_mask] = _seg_rows(block.sem_pix[seg_mask], labels[seg_mask], block.accumulation)
    depth_mask = rays.has_depth & (block.opacity >= config.opacity_min) & (block.depth_pix > 0)
    residual = np.zeros(n)
    if np.any(depth_mask):
        residual[depth_mask] = np.log(block.depth_pix[depth_mask]) - np.log(rays.depth_label[depth_mask])
    w = np.where(block.samples.mask, block.weights, 0.0)
    dist = _distortion_rows(block.samples.midpoints, np.where(block.samples.mask, block.samples.delta, 0.0), w)
    return seg, seg_mask, residual, depth_mask, dist


def ray_terms(result: RenderResult, config: LossConfig) -> RayTerms:
    if len(result) == 0:
        raise InputError("空のバッチでは損失を計算できません")
    parts = [_block_terms(b, config) for b in result.blocks]
    return RayTerms(
        seg=np.concatenate([p[0] for p in parts]),
        seg_mask=np.concatenate([p[1] for p in parts]),
        log_residual=np.concatenate([p[2] for p in parts]),
        depth_mask=np.concatenate([p[3] for p in parts]),
        dist=np.concatenate([p[4] for p in parts]),
        accumulation=result.accumulation,
    )


def total_loss(
    result: RenderResult,
    field: SemanticDensityField,
    config: Optional[LossConfig] = None,
    *,
    gt_grid: Optional[OccupancyGrid] = None,
    terms: Optional[RayTerms] = None,
) -> LossReport:
    """
    各項をレイ平均し、設定の重みで合算する。

    深度項は有効な深度ラベルを持ち、不透明度が opacity_min 以上のレイだけで計算する。
    """
    config = config or LossConfig()
    terms = terms or ray_terms(result, config)

    l_seg = float(ordered_sum(terms.seg[terms.seg_mask], axis=0) / terms.n_seg) if terms.n_seg else 0.0
    l_depth = 0.0
    if terms.n_depth:
        d = terms.log_residual[terms.depth_mask]
        mean = terms.mean_residual()
        l_depth = float(ordered_sum(d * d, axis=0) / terms.n_depth - config.lambda_var * mean * mean)
    l_dist = float(ordered_sum(terms.dist, axis=0) / terms.n_rays)
    l_tv = tv_loss(field)
    l_occ3d = 0.0
    if config.w_occ3d > 0:
        if gt_grid is None:
            raise InputError("w_occ3d > 0 には GT 占有グリッドが必要です")
        l_occ3d = occ3d_loss(field, gt_grid)

    total = (
        config.w_seg * l_seg
        + config.w_depth * l_depth
        + config.w_dist * l_dist
        + config.w_tv * l_tv
        + config.w_occ3d * l_occ3d
    )
    report = LossReport(
        l_seg=l_seg,
        l_depth=l_depth,
        l_dist=l_dist,
        l_tv=l_tv,
        l_occ3d=l_occ3d,
        total=total,
        counts={"rays": terms.n_rays, "seg": terms.n_seg, "depth": terms.n_depth},
    )
    LOG.debug("total_loss: %s", report.to_dict())
    return report
