"""
レイ上の点サンプリングの共通インターフェース。

単一レイ用の `SampleSet` と、複数レイをパディングして詰めた `SampleBatch` を定義する。
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from common.geometry import RayBatch

__all__ = ["SampleSet", "SampleBatch", "PointSampler", "composite_weights"]


@dataclass
class SampleSet:
    """単一レイのサンプル z_k と区間長 β_k。"""

    t_values: np.ndarray
    deltas: np.ndarray
    t_near: float
    t_far: float
    strategy: str = "unified"

    def __post_init__(self) -> None:
        self.t_values = np.asarray(self.t_values, dtype=np.float64).reshape(-1)
        self.deltas = np.asarray(self.deltas, dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return len(self.t_values)

    @property
    def edges(self) -> np.ndarray:
        """
        区間の境界。unified では各サンプルを含むビンの端点、hierarchical では
        [z_k, z_k + β_k] の端点になる。
        """
        if self.strategy == "hierarchical" and len(self):
            return np.concatenate([self.t_values, [self.t_far]])
        return self.t_near + np.concatenate([[0.0], np.cumsum(self.deltas)])

    @property
    def midpoints(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[:-1] + e[1:])


@dataclass
class SampleBatch:
    """(N, K) にパディングしたサンプル。mask が False の要素は β=0 の詰め物。"""

    t: np.ndarray
    delta: np.ndarray
    mask: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    strategy: str = "unified"

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @property
    def edges(self) -> np.ndarray:
        """(N, K+1) の区間境界。"""
        if self.strategy == "hierarchical":
            # 詰め物は t_far で幅 0 の区間にする
            lo = np.where(self.mask, self.t, self.t_far[:, None])
            return np.concatenate([lo, self.t_far[:, None]], axis=1)
        start = self.t_near[:, None]
        return start + np.concatenate(
            [np.zeros((len(self), 1)), np.cumsum(self.delta, axis=1)], axis=1
        )

    @property
    def midpoints(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[:, :-1] + e[:, 1:])

    def row(self, i: int) -> SampleSet:
        m = self.mask[i]
        return SampleSet(
            t_values=self.t[i, m],
            deltas=self.delta[i, m],
            t_near=float(self.t_near[i]),
            t_far=float(self.t_far[i]),
            strategy=self.strategy,
        )

    def take(self, index) -> "SampleBatch":
        return SampleBatch(
            t=self.t[index],
            delta=self.delta[index],
            mask=self.mask[index],
            t_near=self.t_near[index],
            t_far=self.t_far[index],
            strategy=self.strategy,
        )

    @classmethod
    def from_sets(cls, sets: Sequence[SampleSet]) -> "SampleBatch":
        n = len(sets)
        k = max((len(s) for s in sets), default=0)
        t = np.zeros((n, k))
        delta = np.zeros((n, k))
        mask = np.zeros((n, k), dtype=bool)
        for i, s in enumerate(sets):
            t[i, : len(s)] = s.t_values
            delta[i, : len(s)] = s.deltas
            mask[i, : len(s)] = True
        # 詰め物の位置は最後の有効サンプルに揃える（範囲外問い合わせを避ける）
        for i, s in enumerate(sets):
            if len(s) and len(s) < k:
                t[i, len(s) :] = s.t_values[-1]
        strategy = sets[0].strategy if sets else "unified"
        return cls(
            t=t,
            delta=delta,
            mask=mask,
            t_near=np.array([s.t_near for s in sets], dtype=np.float64),
            t_far=np.array([s.t_far for s in sets], dtype=np.float64),
            strategy=strategy,
        )


def composite_weights(
    sigma: np.ndarray, delta: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    α_k = 1 − exp(−σ_k β_k), T_k = exp(−Σ_{t<k} σ_t β_t), w_k = T_k α_k。

    詰め物は β=0 なので α=0 となり結果に寄与しない。
    """
    tau = sigma * delta
    alpha = -np.expm1(-tau)
    optical = np.cumsum(tau, axis=-1)
    trans = np.exp(-np.concatenate([np.zeros(tau.shape[:-1] + (1,)), optical[..., :-1]], axis=-1))
    return trans, alpha, trans * alpha


class PointSampler(ABC):
    """レイ集合からサンプル点を生成するサンプラの基底クラス。"""

    name: str = ""

    def __init__(self, *, jitter: bool = True) -> None:
        self.jitter = jitter

    @abstractmethod
    def sample(
        self,
        field,
        rays: RayBatch,
        rng: Optional[np.random.Generator],
        *,
        training: bool = True,
    ) -> SampleBatch:
        """
        rays の [t_near, t_far]（ボックスで切り詰め済み）からサンプルを生成する。

        training=False もしくは rng=None のときはジッタを掛けない。
        """

    def __repr__(self) -> str:  # pragma: no cover - デバッグ用途
        return f"{self.__class__.__name__}(jitter={self.jitter})"
