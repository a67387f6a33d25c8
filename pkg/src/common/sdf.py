"""
明示的 Semantic Density Field（ボクセルごとの密度・意味ロジット）。

密度は活性化前のパラメータ ρ を保持し、σ = softplus(ρ) ≥ 0 で評価する。
点問い合わせは 8 近傍ボクセル中心の三線形補間で、逆伝播に必要な角インデックスと
重みも返す。占有抽出はボクセル中心で評価する（補間なし）。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from common.errors import InputError
from common.geometry import Box

__all__ = [
    "SemanticDensityField",
    "OccupancyGrid",
    "FieldQuery",
    "FieldSamples",
    "init_field",
    "query",
    "query_points",
    "extract_occupancy",
    "softplus",
    "softplus_grad",
]

LOG = logging.getLogger(__name__)

# 8 角のオフセット (dx, dy, dz)。順序は逆伝播と共有する。
CORNER_OFFSETS = np.array(
    [[dx, dy, dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)], dtype=np.int64
)
BOUNDS_TOL = 1e-6


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus_grad(x: np.ndarray) -> np.ndarray:
    """softplus の導関数 = sigmoid。"""
    return expit(x)


@dataclass
class SemanticDensityField:
    """最適化対象の状態。配列は (H, W, D) / (H, W, D, L) の C 順。"""

    dims: Tuple[int, int, int]
    num_classes: int
    origin: np.ndarray
    voxel_size: float
    density_params: np.ndarray
    semantic_params: np.ndarray

    def __post_init__(self) -> None:
        self.dims = tuple(int(v) for v in self.dims)  # type: ignore[assignment]
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise InputError(f"dims が不正です: {self.dims}")
        if self.num_classes < 2:
            raise InputError(f"クラス数は 2 以上が必要です: {self.num_classes}")
        if not self.voxel_size > 0:
            raise InputError(f"voxel_size は正である必要があります: {self.voxel_size}")
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.voxel_size = float(self.voxel_size)
        self.density_params = np.asarray(self.density_params, dtype=np.float64).reshape(self.dims)
        self.semantic_params = np.asarray(self.semantic_params, dtype=np.float64).reshape(
            self.dims + (self.num_classes,)
        )

    @property
    def voxel_count(self) -> int:
        h, w, d = self.dims
        return h * w * d

    @property
    def param_count(self) -> int:
        return self.voxel_count * (1 + self.num_classes)

    @property
    def bounds(self) -> Box:
        hi = self.origin + np.asarray(self.dims) * self.voxel_size
        return Box(tuple(self.origin.tolist()), tuple(hi.tolist()))

    def sigma(self) -> np.ndarray:
        return softplus(self.density_params)

    def voxel_centers(self) -> np.ndarray:
        idx = np.indices(self.dims).reshape(3, -1).T
        return self.origin + (idx + 0.5) * self.voxel_size

    def copy(self) -> "SemanticDensityField":
        return SemanticDensityField(
            dims=self.dims,
            num_classes=self.num_classes,
            origin=self.origin.copy(),
            voxel_size=self.voxel_size,
            density_params=self.density_params.copy(),
            semantic_params=self.semantic_params.copy(),
        )

    def flat_params(self) -> np.ndarray:
        """密度 → 意味ロジットの順で連結した 1 次元ビュー（コピー）。"""
        return np.concatenate([self.density_params.reshape(-1), self.semantic_params.reshape(-1)])

    def set_flat_params(self, flat: np.ndarray) -> None:
        n = self.voxel_count
        self.density_params = np.asarray(flat[:n], dtype=np.float64).reshape(self.dims).copy()
        self.semantic_params = (
            np.asarray(flat[n:], dtype=np.float64).reshape(self.dims + (self.num_classes,)).copy()
        )


@dataclass
class OccupancyGrid:
    """離散占有グリッド。ラベル num_classes が空ボクセル。"""

    dims: Tuple[int, int, int]
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        self.dims = tuple(int(v) for v in self.dims)  # type: ignore[assignment]
        self.labels = np.asarray(self.labels).reshape(self.dims).astype(np.int64)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.num_classes):
            raise InputError(
                f"ラベルは [0, {self.num_classes}] に収まる必要があります: "
                f"min={self.labels.min()} max={self.labels.max()}"
            )

    @property
    def empty_label(self) -> int:
        return self.num_classes

    @classmethod
    def empty(cls, dims: Sequence[int], num_classes: int) -> "OccupancyGrid":
        return cls(tuple(dims), np.full(tuple(dims), num_classes, dtype=np.int64), num_classes)  # type: ignore[arg-type]

    def occupied(self) -> np.ndarray:
        return self.labels != self.empty_label

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.num_classes == other.num_classes
            and bool(np.array_equal(self.labels, other.labels))
        )


@dataclass
class FieldSamples:
    """ベクトル化した問い合わせ結果。逆伝播用に角インデックスと重みを保持する。"""

    sigma: np.ndarray  # (N,)
    density_pre: np.ndarray  # (N,) 補間後・活性化前
    sem_logits: np.ndarray  # (N, L)
    corner_index: np.ndarray  # (N, 8) 平坦化ボクセル番号
    corner_weight: np.ndarray  # (N, 8)


@dataclass
class FieldQuery:
    sigma: float
    sem_logits: np.ndarray
    corner_index: np.ndarray
    corner_weight: np.ndarray


def init_field(
    dims: Sequence[int],
    num_classes: int,
    origin: Sequence[float],
    voxel_size: float,
    density_init: float = -5.0,
    logit_init: float = 0.0,
) -> SemanticDensityField:
    if not voxel_size > 0:
        raise InputError(f"voxel_size は正である必要があります: {voxel_size}")
    dims = tuple(int(v) for v in dims)
    return SemanticDensityField(
        dims=dims,  # type: ignore[arg-type]
        num_classes=num_classes,
        origin=np.asarray(origin, dtype=np.float64),
        voxel_size=voxel_size,
        density_params=np.full(dims, float(density_init)),
        semantic_params=np.full(dims + (num_classes,), float(logit_init)),
    )


def _corners(
    field: SemanticDensityField, points: np.ndarray, mode: str
) -> Tuple[np.ndarray, np.ndarray]:
    dims = np.asarray(field.dims)
    g = (points - field.origin) / field.voxel_size - 0.5
    g = np.clip(g, 0.0, dims - 1)
    if mode == "nearest":
        nearest = np.minimum(np.floor(g + 0.5).astype(np.int64), dims - 1)
        flat = np.ravel_multi_index(nearest.T, field.dims)
        index = np.repeat(flat[:, None], 8, axis=1)
        weight = np.zeros(index.shape)
        weight[:, 0] = 1.0
        return index, weight

    i0 = np.minimum(np.floor(g).astype(np.int64), np.maximum(dims - 2, 0))
    frac = g - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    # 軸ごとの (下側重み, 上側重み)
    lo_w = 1.0 - frac
    hi_w = frac
    index = np.empty((len(points), 8), dtype=np.int64)
    weight = np.empty((len(points), 8))
    for c, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        ix = i1[:, 0] if dx else i0[:, 0]
        iy = i1[:, 1] if dy else i0[:, 1]
        iz = i1[:, 2] if dz else i0[:, 2]
        index[:, c] = (ix * field.dims[1] + iy) * field.dims[2] + iz
        weight[:, c] = (
            (hi_w[:, 0] if dx else lo_w[:, 0])
            * (hi_w[:, 1] if dy else lo_w[:, 1])
            * (hi_w[:, 2] if dz else lo_w[:, 2])
        )
    return index, weight


def query_points(
    field: SemanticDensityField,
    points: np.ndarray,
    *,
    interpolation: str = "trilinear",
) -> FieldSamples:
    """点群 (N, 3) での σ と意味ロジット。範囲外の点は InputError。"""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts):
        inside = field.bounds.contains(pts, tol=BOUNDS_TOL * field.voxel_size)
        if not np.all(inside):
            bad = int(np.flatnonzero(~inside)[0])
            raise InputError(f"問い合わせ点がフィールドの範囲外です: index={bad} p={pts[bad].tolist()}")
    if interpolation not in ("trilinear", "nearest"):
        raise InputError(f"未対応の補間方式です: {interpolation}")
    index, weight = _corners(field, pts, interpolation)
    dens = field.density_params.reshape(-1)
    sem = field.semantic_params.reshape(-1, field.num_classes)
    pre = np.einsum("nc,nc->n", weight, dens[index])
    logits = np.einsum("nc,ncl->nl", weight, sem[index])
    return FieldSamples(
        sigma=softplus(pre),
        density_pre=pre,
        sem_logits=logits,
        corner_index=index,
        corner_weight=weight,
    )


def query(field: SemanticDensityField, p: Sequence[float], *, interpolation: str = "trilinear") -> FieldQuery:
    s = query_points(field, np.asarray(p, dtype=np.float64)[None], interpolation=interpolation)
    return FieldQuery(
        sigma=float(s.sigma[0]),
        sem_logits=s.sem_logits[0],
        corner_index=s.corner_index[0],
        corner_weight=s.corner_weight[0],
    )


def extract_occupancy(
    field: SemanticDensityField,
    tau: float,
    *,
    free_class: Optional[int] = None,
) -> OccupancyGrid:
    """
    σ ≥ τ のボクセルに argmax クラス、それ以外に空ラベルを割り当てる。

    free_class を指定すると、argmax が自由空間クラスになったボクセルも空とみなす。
    """
    if tau < 0:
        raise InputError(f"tau は非負である必要があります: {tau}")
    sigma = field.sigma()
    labels = np.argmax(field.semantic_params, axis=-1).astype(np.int64)
    empty = sigma < tau
    if free_class is not None:
        empty |= labels == free_class
    labels[empty] = field.num_classes
    LOG.debug("extract_occupancy: tau=%s occupied=%d", tau, int((~empty).sum()))
    return OccupancyGrid(field.dims, labels, field.num_classes)
