"""
カメラモデル・剛体姿勢・画素レイ生成・フレーム間のレイ変換。

座標系の約束:
    * カメラ座標系は x 右 / y 下 / z 前方（ピンホール標準）。
    * 外部パラメータは camera-to-ego（カメラ座標 → 車両座標）として保持する。
    * エゴ姿勢 E_t は ego-to-world。隣接フレーム k のレイを現フレーム t へ移すには
      E_t^{-1} · E_k を掛ける。
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field, replace
from typing import Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from common.errors import InputError

__all__ = [
    "Pinhole",
    "Pose",
    "Ray",
    "RayBatch",
    "Box",
    "pixel_ray",
    "pixel_rays",
    "project_point",
    "transform_ray",
    "transform_rays",
    "grid_intersect",
    "intersect_box",
]

LOG = logging.getLogger(__name__)

ORTHO_TOL = 1e-9
UNIT_TOL = 1e-9
PIXEL_OFFSETS = {"center": 0.5, "corner": 0.0}


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class Pinhole:
    """ピンホールカメラの内部パラメータ（単位: 画素）。"""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise InputError(f"焦点距離は正である必要があります: fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise InputError(f"画像サイズが不正です: {self.width}x{self.height}")

    @classmethod
    def from_hfov(cls, width: int, height: int, hfov_deg: float) -> "Pinhole":
        fx = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0, width=width, height=height)

    @classmethod
    def from_json(cls, data: Mapping) -> "Pinhole":
        return cls(
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            width=int(data["width"]),
            height=int(data["height"]),
        )

    def to_json(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @property
    def pixel_count(self) -> int:
        return self.width * self.height


@dataclass(frozen=True, eq=False)
class Pose:
    """回転行列 + 並進で表す剛体変換。点 p は R·p + t へ写る。"""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(trans)):
            raise InputError("姿勢に有限でない値が含まれています")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > ORTHO_TOL:
            raise InputError("回転行列が正規直交ではありません")
        if abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL:
            raise InputError("回転行列の行列式が 1 ではありません")
        object.__setattr__(self, "rotation", _frozen(rot))
        object.__setattr__(self, "translation", _frozen(trans))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Pose":
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "Pose":
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_json(cls, data: Mapping) -> "Pose":
        return cls(np.asarray(data["rotation"], dtype=np.float64), np.asarray(data["translation"]))

    def to_json(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rot_t = self.rotation.T
        return Pose(rot_t, -rot_t @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other（先に other を適用）。"""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def apply_directions(self, dirs: np.ndarray) -> np.ndarray:
        return np.asarray(dirs) @ self.rotation.T

    def same_as(self, other: "Pose") -> bool:
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )


@dataclass(frozen=True, eq=False)
class Ray:
    """一本のレイと、そのレイが運ぶ 2D ラベル。"""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = math.inf
    frame_offset: int = 0
    sem_label: int = -1
    depth_label: Optional[float] = None
    weight: float = 1.0

    def __post_init__(self) -> None:
        origin = np.array(self.origin, dtype=np.float64).reshape(3)
        direction = np.array(self.direction, dtype=np.float64).reshape(3)
        if abs(float(np.linalg.norm(direction)) - 1.0) > UNIT_TOL:
            raise InputError(f"方向ベクトルが単位長ではありません: |d|={np.linalg.norm(direction)}")
        if not (0.0 <= self.t_near < self.t_far):
            raise InputError(f"走査範囲が不正です: t_near={self.t_near}, t_far={self.t_far}")
        if self.weight < 0:
            raise InputError(f"重みは非負である必要があります: {self.weight}")
        object.__setattr__(self, "origin", _frozen(origin))
        object.__setattr__(self, "direction", _frozen(direction))

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction

    @property
    def has_depth(self) -> bool:
        return self.depth_label is not None


@dataclass(frozen=True)
class Box:
    """軸平行な直方体 [lo, hi]。"""

    lo: Tuple[float, float, float]
    hi: Tuple[float, float, float]

    def __post_init__(self) -> None:
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise InputError(f"ボックスの大きさが正ではありません: lo={self.lo} hi={self.hi}")

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        p = np.asarray(points)
        lo = np.asarray(self.lo) - tol
        hi = np.asarray(self.hi) + tol
        return np.all((p >= lo) & (p <= hi), axis=-1)


@dataclass
class RayBatch:
    """
    レイ集合を列指向の numpy 配列で保持する。

    深度ラベルが無いレイは `depth_label` に NaN を入れる。
    """

    origins: np.ndarray
    directions: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    frame_offset: np.ndarray
    sem_label: np.ndarray
    depth_label: np.ndarray
    weight: np.ndarray = dc_field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        n = len(self.origins)
        self.origins = np.asarray(self.origins, dtype=np.float64).reshape(n, 3)
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(n, 3)
        self.t_near = np.asarray(self.t_near, dtype=np.float64).reshape(n)
        self.t_far = np.asarray(self.t_far, dtype=np.float64).reshape(n)
        self.frame_offset = np.asarray(self.frame_offset, dtype=np.int64).reshape(n)
        self.sem_label = np.asarray(self.sem_label, dtype=np.int64).reshape(n)
        self.depth_label = np.asarray(self.depth_label, dtype=np.float64).reshape(n)
        if self.weight is None:
            self.weight = np.ones(n)
        self.weight = np.asarray(self.weight, dtype=np.float64).reshape(n)

    def __len__(self) -> int:
        return len(self.origins)

    @property
    def has_depth(self) -> np.ndarray:
        return np.isfinite(self.depth_label)

    @classmethod
    def empty(cls) -> "RayBatch":
        return cls(
            origins=np.zeros((0, 3)),
            directions=np.zeros((0, 3)),
            t_near=np.zeros(0),
            t_far=np.zeros(0),
            frame_offset=np.zeros(0, dtype=np.int64),
            sem_label=np.zeros(0, dtype=np.int64),
            depth_label=np.zeros(0),
        )

    @classmethod
    def from_rays(cls, rays: Iterable[Ray]) -> "RayBatch":
        rays = list(rays)
        if not rays:
            return cls.empty()
        return cls(
            origins=np.stack([r.origin for r in rays]),
            directions=np.stack([r.direction for r in rays]),
            t_near=np.array([r.t_near for r in rays]),
            t_far=np.array([r.t_far for r in rays]),
            frame_offset=np.array([r.frame_offset for r in rays]),
            sem_label=np.array([r.sem_label for r in rays]),
            depth_label=np.array([np.nan if r.depth_label is None else r.depth_label for r in rays]),
            weight=np.array([r.weight for r in rays]),
        )

    @classmethod
    def concat(cls, batches: Sequence["RayBatch"]) -> "RayBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            return cls.empty()
        return cls(
            origins=np.concatenate([b.origins for b in batches]),
            directions=np.concatenate([b.directions for b in batches]),
            t_near=np.concatenate([b.t_near for b in batches]),
            t_far=np.concatenate([b.t_far for b in batches]),
            frame_offset=np.concatenate([b.frame_offset for b in batches]),
            sem_label=np.concatenate([b.sem_label for b in batches]),
            depth_label=np.concatenate([b.depth_label for b in batches]),
            weight=np.concatenate([b.weight for b in batches]),
        )

    def take(self, index) -> "RayBatch":
        return RayBatch(
            origins=self.origins[index],
            directions=self.directions[index],
            t_near=self.t_near[index],
            t_far=self.t_far[index],
            frame_offset=self.frame_offset[index],
            sem_label=self.sem_label[index],
            depth_label=self.depth_label[index],
            weight=self.weight[index],
        )

    def ray(self, i: int) -> Ray:
        depth = float(self.depth_label[i])
        return Ray(
            origin=self.origins[i],
            direction=self.directions[i],
            t_near=float(self.t_near[i]),
            t_far=float(self.t_far[i]),
            frame_offset=int(self.frame_offset[i]),
            sem_label=int(self.sem_label[i]),
            depth_label=depth if math.isfinite(depth) else None,
            weight=float(self.weight[i]),
        )

    def to_rays(self) -> List[Ray]:
        return [self.ray(i) for i in range(len(self))]


# ---------------------------------------------------------------------------#
# レイ生成
# ---------------------------------------------------------------------------#
def _check_pixel(cam: Pinhole, u: int, v: int) -> None:
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise InputError(f"画素 ({u}, {v}) は画像 {cam.width}x{cam.height} の範囲外です")


def pixel_ray(
    cam: Pinhole,
    cam_pose: Pose,
    u: int,
    v: int,
    *,
    convention: str = "center",
) -> Ray:
    """画素 (u, v) を通るレイを cam_pose の座標系で返す。"""
    _check_pixel(cam, u, v)
    offset = PIXEL_OFFSETS[convention]
    d_cam = np.array([(u + offset - cam.cx) / cam.fx, (v + offset - cam.cy) / cam.fy, 1.0])
    d = cam_pose.apply_directions(d_cam)
    d = d / np.linalg.norm(d)
    return Ray(origin=cam_pose.translation.copy(), direction=d)


def pixel_rays(
    cam: Pinhole,
    cam_pose: Pose,
    *,
    convention: str = "center",
) -> Tuple[np.ndarray, np.ndarray]:
    """全画素のレイ (origins, directions) を行優先（v, u の順）で返す。"""
    offset = PIXEL_OFFSETS[convention]
    vs, us = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    d_cam = np.stack(
        [
            (us.reshape(-1) + offset - cam.cx) / cam.fx,
            (vs.reshape(-1) + offset - cam.cy) / cam.fy,
            np.ones(cam.pixel_count),
        ],
        axis=-1,
    )
    dirs = cam_pose.apply_directions(d_cam)
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam_pose.translation, dirs.shape).copy()
    return origins, dirs


def project_point(cam: Pinhole, cam_pose: Pose, point: np.ndarray) -> Tuple[float, float]:
    """cam_pose 座標系の点を画素座標（連続値）へ投影する。"""
    p_cam = cam_pose.inverse().apply_points(np.asarray(point, dtype=np.float64))
    if p_cam[2] <= 0:
        raise InputError("点がカメラの後方にあります")
    return (
        float(cam.fx * p_cam[0] / p_cam[2] + cam.cx),
        float(cam.fy * p_cam[1] / p_cam[2] + cam.cy),
    )


# ---------------------------------------------------------------------------#
# フレーム間変換
# ---------------------------------------------------------------------------#
def relative_pose(src_ego: Pose, dst_ego: Pose) -> Pose:
    """src フレームの座標を dst フレームへ写す E_dst^{-1} · E_src。"""
    return dst_ego.inverse().compose(src_ego)


def transform_ray(ray: Ray, src_ego: Pose, dst_ego: Pose) -> Ray:
    """src_ego 座標のレイを dst_ego 座標へ移す。ラベルと frame_offset は保持。"""
    if src_ego.same_as(dst_ego):
        return ray
    rel = relative_pose(src_ego, dst_ego)
    d = rel.apply_directions(ray.direction)
    return replace(ray, origin=rel.apply_points(ray.origin), direction=d / np.linalg.norm(d))


def transform_rays(batch: RayBatch, src_ego: Pose, dst_ego: Pose) -> RayBatch:
    if src_ego.same_as(dst_ego) or len(batch) == 0:
        return batch
    rel = relative_pose(src_ego, dst_ego)
    dirs = rel.apply_directions(batch.directions)
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    return replace(batch, origins=rel.apply_points(batch.origins), directions=dirs)


# ---------------------------------------------------------------------------#
# ボックス交差（スラブ法）
# ---------------------------------------------------------------------------#
def intersect_box(
    origins: np.ndarray,
    directions: np.ndarray,
    t_near: np.ndarray,
    t_far: np.ndarray,
    box: Box,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ベクトル化したスラブ法。戻り値は (t0, t1, hit)。"""
    lo = np.asarray(box.lo, dtype=np.float64)
    hi = np.asarray(box.hi, dtype=np.float64)
    o = np.atleast_2d(origins)
    d = np.atleast_2d(directions)
    parallel = d == 0.0
    safe_d = np.where(parallel, 1.0, d)
    ta = (lo - o) / safe_d
    tb = (hi - o) / safe_d
    slab_min = np.minimum(ta, tb)
    slab_max = np.maximum(ta, tb)
    inside_slab = (o >= lo) & (o <= hi)
    slab_min = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), slab_min)
    slab_max = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), slab_max)
    t0 = np.maximum(np.max(slab_min, axis=-1), np.asarray(t_near, dtype=np.float64))
    t1 = np.minimum(np.min(slab_max, axis=-1), np.asarray(t_far, dtype=np.float64))
    hit = t0 < t1
    return t0, t1, hit


def grid_intersect(ray: Ray, bounds: Box) -> Optional[Tuple[float, float]]:
    """レイと bounds の交差区間を [ray.t_near, ray.t_far] に切り詰めて返す。"""
    t0, t1, hit = intersect_box(
        ray.origin[None], ray.direction[None], np.array([ray.t_near]), np.array([ray.t_far]), bounds
    )
    if not hit[0]:
        return None
    return float(t0[0]), float(t1[0])
