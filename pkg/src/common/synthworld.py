"""
手続き的な正解データ生成器。

シーン仕様（JSON）から意味占有グリッドを作り、多カメラのエゴ軌跡を置き、
ボクセル走査（Amanatides–Woo 方式）で 2D の意味・深度ラベルを厳密に求める。

座標の約束:
    * ワールド座標 = 参照フレームのエゴ座標（E_reference = I）。x 前方 / y 左 / z 上。
    * 動的物体の位置は仕様の座標 + velocity × (frame − reference)。
    * クラス表の末尾に自由空間クラスを自動で追加する（L − 1）。
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from common.errors import ConfigError, InputError
from common.evalio.formats import read_occ, write_occ
from common.evalio.images import colorize, depth_to_mm, mm_to_depth, read_pgm, write_pgm, write_ppm
from common.geometry import Box, Pinhole, Pose, intersect_box, pixel_rays
from common.sdf import OccupancyGrid, SemanticDensityField

__all__ = [
    "PROFILES",
    "FREE_CLASS_NAME",
    "ClassInfo",
    "Camera",
    "LabelImage",
    "Scene",
    "resolve_spec",
    "gen_scene",
    "cast_rays",
    "raycast_labels",
    "grid_to_field",
    "save_scene",
    "load_scene",
]

LOG = logging.getLogger(__name__)

FREE_CLASS_NAME = "free"
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

# カメラ座標軸（x 右 / y 下 / z 前）をエゴ座標（x 前 / y 左 / z 上）で表した列
_CAMERA_BASE = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


# ---------------------------------------------------------------------------#
# プロファイル
# ---------------------------------------------------------------------------#
_DEFAULT_CLASSES = [
    {"id": 0, "name": "road", "dynamic": False},
    {"id": 1, "name": "building", "dynamic": False},
    {"id": 2, "name": "car", "dynamic": True},
    {"id": 3, "name": "vegetation", "dynamic": False},
    {"id": 4, "name": "cone", "dynamic": False},
]

_DEFAULT_OBJECTS = [
    {"type": "ground", "class": 0, "height": 0.8},
    {"type": "box", "class": 1, "min": [-12.8, 5.6, 0.0], "max": [-2.0, 12.8, 4.8]},
    {"type": "box", "class": 1, "min": [2.8, 6.4, 0.0], "max": [12.8, 12.8, 3.6]},
    {"type": "box", "class": 1, "min": [-10.0, -12.8, 0.0], "max": [4.0, -7.2, 4.0]},
    {"type": "cylinder", "class": 3, "center": [-6.2, 3.4], "radius": 1.0, "z_min": 0.0, "z_max": 3.2},
    {"type": "cylinder", "class": 3, "center": [7.4, -4.2], "radius": 1.2, "z_min": 0.0, "z_max": 2.8},
    {"type": "cylinder", "class": 4, "center": [3.0, 2.2], "radius": 0.45, "z_min": 0.0, "z_max": 0.8},
    {
        "type": "box",
        "class": 2,
        "min": [-2.0, -4.0, 0.0],
        "max": [2.0, -2.2, 1.6],
        "velocity": [0.8, 0.0, 0.0],
    },
]

PROFILES: Dict[str, Dict[str, Any]] = {
    "default": {
        "grid": {"dims": [64, 64, 16], "voxel_size": 0.4, "origin": [-12.8, -12.8, -0.8]},
        "classes": _DEFAULT_CLASSES,
        "objects": _DEFAULT_OBJECTS,
        "trajectory": {"frames": 7, "reference": 3, "step": [1.2, 0.0, 0.0], "yaw_step": 0.0},
        "rig": {"cameras": 6, "width": 48, "height": 32, "hfov_deg": 70.0, "height_m": 1.6, "yaw_offset_deg": 0.0},
        "jitter_objects": 0,
    },
    "ablation": {
        "grid": {"dims": [64, 64, 16], "voxel_size": 0.4, "origin": [-12.8, -12.8, -0.8]},
        "classes": _DEFAULT_CLASSES,
        "objects": _DEFAULT_OBJECTS
        + [
            {"type": "cylinder", "class": 4, "center": [-4.2, -1.8], "radius": 0.45, "z_min": 0.0, "z_max": 0.8},
            {
                "type": "box",
                "class": 2,
                "min": [-8.0, 2.2, 0.0],
                "max": [-4.0, 4.0, 1.6],
                "velocity": [-0.4, 0.0, 0.0],
            },
        ],
        "trajectory": {"frames": 7, "reference": 3, "step": [1.2, 0.0, 0.0], "yaw_step": 0.0},
        "rig": {"cameras": 6, "width": 48, "height": 32, "hfov_deg": 70.0, "height_m": 1.6, "yaw_offset_deg": 0.0},
        "jitter_objects": 4,
    },
    "front-view": {
        "grid": {"dims": [64, 64, 16], "voxel_size": 0.4, "origin": [-12.8, -12.8, -0.8]},
        "classes": _DEFAULT_CLASSES,
        "objects": _DEFAULT_OBJECTS,
        "trajectory": {"frames": 5, "reference": 2, "step": [1.2, 0.0, 0.0], "yaw_step": 0.0},
        "rig": {"cameras": 1, "width": 96, "height": 48, "hfov_deg": 90.0, "height_m": 1.6, "yaw_offset_deg": 0.0},
        "jitter_objects": 0,
    },
    "tiny": {
        "grid": {"dims": [16, 16, 8], "voxel_size": 0.5, "origin": [-4.0, -4.0, -1.0]},
        "classes": [
            {"id": 0, "name": "road", "dynamic": False},
            {"id": 1, "name": "wall", "dynamic": False},
            {"id": 2, "name": "car", "dynamic": True},
            {"id": 3, "name": "cone", "dynamic": False},
        ],
        "objects": [
            {"type": "ground", "class": 0, "height": 1.0},
            {"type": "box", "class": 1, "min": [2.5, -4.0, 0.0], "max": [4.0, 4.0, 2.5]},
            {"type": "box", "class": 1, "min": [-4.0, 2.5, 0.0], "max": [2.5, 4.0, 2.0]},
            {
                "type": "box",
                "class": 2,
                "min": [-1.0, -2.5, 0.0],
                "max": [1.0, -1.5, 1.0],
                "velocity": [0.5, 0.0, 0.0],
            },
            {"type": "cylinder", "class": 3, "center": [-2.25, 1.25], "radius": 0.3, "z_min": 0.0, "z_max": 0.5},
        ],
        "trajectory": {"frames": 3, "reference": 1, "step": [0.5, 0.0, 0.0], "yaw_step": 0.0},
        "rig": {"cameras": 4, "width": 24, "height": 16, "hfov_deg": 90.0, "height_m": 1.0, "yaw_offset_deg": 0.0},
        "jitter_objects": 0,
    },
}

_TOP_KEYS = ("profile", "grid", "classes", "objects", "trajectory", "rig", "jitter_objects")


def _merge(base: Dict[str, Any], over: Mapping[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_spec(data: Optional[Mapping[str, Any]], *, pointer: str = "") -> Dict[str, Any]:
    """
    `profile` があればそのプロファイルを土台に、残りのキーで上書きする。

    グリッド・クラス・物体のどれも無い仕様は default プロファイル扱い。
    """
    data = dict(data or {})
    for key in data:
        if key not in _TOP_KEYS:
            raise ConfigError("未知のキーです", pointer=f"{pointer}/{key}")
    profile = data.pop("profile", None)
    if profile is None and not any(k in data for k in ("grid", "classes", "objects")):
        profile = "default"
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"未知のプロファイルです: {profile!r}", pointer=f"{pointer}/profile")
        spec = _merge(PROFILES[profile], data)
        spec["profile"] = profile
    else:
        spec = _merge({"trajectory": {}, "rig": {}, "jitter_objects": 0}, data)
    return spec


# ---------------------------------------------------------------------------#
# 型
# ---------------------------------------------------------------------------#
@dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    dynamic: bool = False


@dataclass(frozen=True)
class Camera:
    """内部パラメータと取り付け姿勢（camera-to-ego）。"""

    intrinsics: Pinhole
    mount: Pose

    def to_json(self) -> dict:
        return {"intrinsics": self.intrinsics.to_json(), "mount": self.mount.to_json()}

    @classmethod
    def from_json(cls, data: Mapping) -> "Camera":
        return cls(Pinhole.from_json(data["intrinsics"]), Pose.from_json(data["mount"]))


@dataclass
class LabelImage:
    """(height, width) の意味ラベルと深度 [m]。自由空間画素の深度は NaN。"""

    sem: np.ndarray
    depth: np.ndarray
    free_class: int

    def __post_init__(self) -> None:
        self.sem = np.asarray(self.sem, dtype=np.int64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.sem.shape != self.depth.shape:
            raise InputError(f"sem と depth の形状が一致しません: {self.sem.shape} != {self.depth.shape}")
        if not np.array_equal(np.isfinite(self.depth), self.sem != self.free_class):
            raise InputError("深度の有効画素と非自由空間画素が一致しません")

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depth)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.sem.shape  # type: ignore[return-value]


@dataclass
class Scene:
    spec: Dict[str, Any]
    seed: int
    classes: List[ClassInfo]
    dims: Tuple[int, int, int]
    origin: np.ndarray
    voxel_size: float
    grids: List[OccupancyGrid]
    ego_poses: List[Pose]
    rig: List[Camera]
    reference: int
    labels: Dict[Tuple[int, int], LabelImage] = dc_field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def free_class(self) -> int:
        return self.num_classes - 1

    @property
    def dynamic_classes(self) -> List[int]:
        return [c.id for c in self.classes if c.dynamic]

    @property
    def frame_count(self) -> int:
        return len(self.ego_poses)

    @property
    def reference_grid(self) -> OccupancyGrid:
        return self.grids[self.reference]

    @property
    def bounds(self) -> Box:
        hi = self.origin + np.asarray(self.dims) * self.voxel_size
        return Box(tuple(self.origin.tolist()), tuple(hi.tolist()))

    def camera_rays(self, frame: int, camera: int) -> Tuple[np.ndarray, np.ndarray]:
        """フレーム frame・カメラ camera の全画素レイをワールド座標で返す。"""
        self._check_frame(frame)
        cam = self.rig[camera]
        origins, dirs = pixel_rays(cam.intrinsics, cam.mount)
        ego = self.ego_poses[frame]
        return ego.apply_points(origins), ego.apply_directions(dirs)

    def label_image(self, frame: int, camera: int) -> LabelImage:
        key = (frame, camera)
        if key not in self.labels:
            self.labels[key] = raycast_labels(self, frame, camera)
        return self.labels[key]

    def ensure_labels(self) -> None:
        for f in range(self.frame_count):
            for c in range(len(self.rig)):
                self.label_image(f, c)

    def _check_frame(self, frame: int) -> None:
        if not 0 <= frame < self.frame_count:
            raise InputError(f"フレーム {frame} は軌跡 [0, {self.frame_count}) の範囲外です")


# ---------------------------------------------------------------------------#
# 仕様の検証
# ---------------------------------------------------------------------------#
def _num_list(value: Any, n: int, pointer: str) -> List[float]:
    if not isinstance(value, (list, tuple)) or len(value) != n:
        raise ConfigError(f"{n} 要素の数値配列が必要です", pointer=pointer)
    for i, v in enumerate(value):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError("数値が必要です", pointer=f"{pointer}/{i}")
    return [float(v) for v in value]


def _number(data: Mapping, key: str, pointer: str, default: Any = None) -> float:
    if key not in data:
        if default is None:
            raise ConfigError("必須キーがありません", pointer=f"{pointer}/{key}")
        return float(default)
    v = data[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError("数値が必要です", pointer=f"{pointer}/{key}")
    return float(v)


def _parse_classes(spec: Mapping, pointer: str) -> List[ClassInfo]:
    raw = spec.get("classes")
    if not isinstance(raw, list) or not raw:
        raise ConfigError("1 つ以上のクラス定義が必要です", pointer=f"{pointer}/classes")
    classes = []
    for i, entry in enumerate(raw):
        p = f"{pointer}/classes/{i}"
        if not isinstance(entry, Mapping):
            raise ConfigError("オブジェクトが必要です", pointer=p)
        for key in entry:
            if key not in ("id", "name", "dynamic"):
                raise ConfigError("未知のキーです", pointer=f"{p}/{key}")
        if entry.get("id") != i:
            raise ConfigError(f"クラス ID は 0 からの連番である必要があります（期待値 {i}）", pointer=f"{p}/id")
        classes.append(ClassInfo(i, str(entry.get("name", f"class{i}")), bool(entry.get("dynamic", False))))
    classes.append(ClassInfo(len(classes), FREE_CLASS_NAME, False))
    return classes


_OBJECT_KEYS = {
    "ground": {"type", "class", "height"},
    "box": {"type", "class", "min", "max", "velocity"},
    "cylinder": {"type", "class", "center", "radius", "z_min", "z_max", "velocity"},
}


def _check_objects(spec: Mapping, classes: Sequence[ClassInfo], pointer: str) -> List[Dict[str, Any]]:
    raw = spec.get("objects", [])
    if not isinstance(raw, list):
        raise ConfigError("配列が必要です", pointer=f"{pointer}/objects")
    semantic = len(classes) - 1
    objects = []
    for i, obj in enumerate(raw):
        p = f"{pointer}/objects/{i}"
        if not isinstance(obj, Mapping):
            raise ConfigError("オブジェクトが必要です", pointer=p)
        kind = obj.get("type")
        if kind not in _OBJECT_KEYS:
            raise ConfigError(f"未知の物体タイプです: {kind!r}", pointer=f"{p}/type")
        for key in obj:
            if key not in _OBJECT_KEYS[kind]:
                raise ConfigError("未知のキーです", pointer=f"{p}/{key}")
        cls = obj.get("class")
        if isinstance(cls, bool) or not isinstance(cls, int) or not 0 <= cls < semantic:
            raise ConfigError(f"クラス ID は [0, {semantic}) が必要です", pointer=f"{p}/class")
        if kind == "ground":
            if _number(obj, "height", p) <= 0:
                raise ConfigError("正の値が必要です", pointer=f"{p}/height")
        elif kind == "box":
            lo = _num_list(obj.get("min"), 3, f"{p}/min")
            hi = _num_list(obj.get("max"), 3, f"{p}/max")
            if any(h <= l for l, h in zip(lo, hi)):
                raise ConfigError("max は min より大きい必要があります", pointer=f"{p}/max")
        else:
            _num_list(obj.get("center"), 2, f"{p}/center")
            if _number(obj, "radius", p) <= 0:
                raise ConfigError("正の値が必要です", pointer=f"{p}/radius")
            if _number(obj, "z_max", p) <= _number(obj, "z_min", p):
                raise ConfigError("z_max は z_min より大きい必要があります", pointer=f"{p}/z_max")
        if "velocity" in obj:
            v = _num_list(obj["velocity"], 3, f"{p}/velocity")
            if any(v) and not classes[cls].dynamic:
                raise ConfigError("静的クラスの物体は動かせません", pointer=f"{p}/velocity")
        objects.append(dict(obj))
    return objects


def _build_rig(spec: Mapping, pointer: str) -> List[Camera]:
    rig = spec.get("rig", {})
    p = f"{pointer}/rig"
    if not isinstance(rig, Mapping):
        raise ConfigError("オブジェクトが必要です", pointer=p)
    cameras = rig.get("cameras", 6)
    if isinstance(cameras, list):
        out = []
        for i, cam in enumerate(cameras):
            try:
                intr = Pinhole.from_json(cam)
                mount = Pose(np.asarray(cam["rotation"], dtype=np.float64), np.asarray(cam["translation"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"カメラ定義が不正です: {exc}", pointer=f"{p}/cameras/{i}") from exc
            out.append(Camera(intr, mount))
        if not out:
            raise ConfigError("カメラが 1 台もありません", pointer=f"{p}/cameras")
        return out
    if isinstance(cameras, bool) or not isinstance(cameras, int) or cameras < 1:
        raise ConfigError("1 以上の整数かカメラ定義の配列が必要です", pointer=f"{p}/cameras")
    width = int(_number(rig, "width", p, 48))
    height = int(_number(rig, "height", p, 32))
    hfov = _number(rig, "hfov_deg", p, 70.0)
    if width < 1 or height < 1 or not 0 < hfov < 180:
        raise ConfigError("画像サイズまたは画角が不正です", pointer=p)
    height_m = _number(rig, "height_m", p, 1.6)
    yaw0 = math.radians(_number(rig, "yaw_offset_deg", p, 0.0))
    intr = Pinhole.from_hfov(width, height, hfov)
    out = []
    for i in range(cameras):
        yaw = yaw0 + 2.0 * math.pi * i / cameras
        rot = Rotation.from_euler("z", yaw).as_matrix() @ _CAMERA_BASE
        # 直交性の丸め誤差を SVD で落とす
        u, _, vt = np.linalg.svd(rot)
        out.append(Camera(intr, Pose(u @ vt, np.array([0.0, 0.0, height_m]))))
    return out


def _build_trajectory(spec: Mapping, pointer: str) -> Tuple[List[Pose], int]:
    traj = spec.get("trajectory", {})
    p = f"{pointer}/trajectory"
    frames = int(_number(traj, "frames", p, 7))
    reference = int(_number(traj, "reference", p, frames // 2))
    if frames < 1:
        raise ConfigError("1 以上が必要です", pointer=f"{p}/frames")
    if not 0 <= reference < frames:
        raise ConfigError(f"[0, {frames}) の範囲で指定してください", pointer=f"{p}/reference")
    step = np.asarray(_num_list(traj.get("step", [0.0, 0.0, 0.0]), 3, f"{p}/step"))
    yaw_step = _number(traj, "yaw_step", p, 0.0)
    poses = []
    for f in range(frames):
        o = f - reference
        poses.append(Pose.identity() if o == 0 else Pose.from_yaw(yaw_step * o, step * o))
    return poses, reference


# ---------------------------------------------------------------------------#
# 生成
# ---------------------------------------------------------------------------#
def _jitter_objects(
    spec: Mapping, classes: Sequence[ClassInfo], rng: np.random.Generator, origin: np.ndarray, extent: np.ndarray
) -> List[Dict[str, Any]]:
    count = int(spec.get("jitter_objects", 0) or 0)
    static = [c.id for c in classes[:-1] if not c.dynamic]
    if not count or not static:
        return []
    vs = float(spec["grid"]["voxel_size"])
    ground_top = origin[2]
    for obj in spec.get("objects", []):
        if obj["type"] == "ground":
            ground_top = max(ground_top, origin[2] + float(obj["height"]))
    out = []
    for _ in range(count):
        cls = int(rng.choice(static))
        size = rng.integers(1, 3, size=3) * vs
        # エゴの通り道（y ≈ 0）は空けておく
        x = rng.uniform(origin[0], origin[0] + extent[0] - size[0])
        side = rng.choice([-1.0, 1.0])
        y = side * rng.uniform(1.6, max(1.7, extent[1] / 2.0 - size[1] - vs))
        lo = [float(x), float(min(y, y + side * size[1])), float(ground_top)]
        hi = [lo[0] + float(size[0]), lo[1] + float(size[1]), lo[2] + float(size[2])]
        out.append({"type": "box", "class": cls, "min": lo, "max": hi})
    return out


def _voxelize(
    objects: Sequence[Mapping], dims: Tuple[int, int, int], origin: np.ndarray, vs: float, offset: int, empty: int
) -> np.ndarray:
    idx = np.indices(dims).reshape(3, -1).T
    centers = origin + (idx + 0.5) * vs
    labels = np.full(len(centers), empty, dtype=np.int64)
    for obj in objects:
        v = np.asarray(obj.get("velocity", [0.0, 0.0, 0.0]), dtype=np.float64) * offset
        kind = obj["type"]
        if kind == "ground":
            mask = centers[:, 2] < origin[2] + float(obj["height"])
        elif kind == "box":
            box = Box(tuple(np.asarray(obj["min"]) + v), tuple(np.asarray(obj["max"]) + v))
            mask = box.contains(centers)
        else:
            cx, cy = np.asarray(obj["center"], dtype=np.float64) + v[:2]
            r = float(obj["radius"])
            z0 = float(obj["z_min"]) + v[2]
            z1 = float(obj["z_max"]) + v[2]
            mask = ((centers[:, 0] - cx) ** 2 + (centers[:, 1] - cy) ** 2 <= r * r) & (
                (centers[:, 2] >= z0) & (centers[:, 2] <= z1)
            )
        labels[mask] = int(obj["class"])
    return labels.reshape(dims)


def _check_ablation(scene: Scene) -> None:
    grid = scene.reference_grid
    occupied = grid.occupied()
    counts = np.bincount(grid.labels[occupied], minlength=scene.num_classes)
    if not any(counts[c] for c in scene.dynamic_classes):
        raise ConfigError("ablation プロファイルには動的物体が必要です", pointer="/objects")
    present = counts[counts > 0]
    if len(present) == 0 or present.min() * 100 > occupied.sum():
        raise ConfigError("ablation プロファイルには希少な小物体が必要です", pointer="/objects")


def gen_scene(
    spec: Optional[Mapping[str, Any]],
    rng: Optional[np.random.Generator] = None,
    *,
    seed: int = 0,
    pointer: str = "",
) -> Scene:
    """
    仕様からシーンを生成する。同じ仕様とシードからは常に同じシーンになる。

    物体が重なるボクセルは仕様の後ろの物体が勝つ。
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    resolved = resolve_spec(spec, pointer=pointer)
    grid = resolved.get("grid")
    if not isinstance(grid, Mapping):
        raise ConfigError("grid が必要です", pointer=f"{pointer}/grid")
    dims_f = _num_list(grid.get("dims"), 3, f"{pointer}/grid/dims")
    dims = tuple(int(v) for v in dims_f)
    if any(d < 1 or d != f for d, f in zip(dims, dims_f)):
        raise ConfigError("正の整数が必要です", pointer=f"{pointer}/grid/dims")
    vs = _number(grid, "voxel_size", f"{pointer}/grid")
    if vs <= 0:
        raise ConfigError("正の値が必要です", pointer=f"{pointer}/grid/voxel_size")
    origin = np.asarray(_num_list(grid.get("origin", [0.0, 0.0, 0.0]), 3, f"{pointer}/grid/origin"))

    classes = _parse_classes(resolved, pointer)
    objects = _check_objects(resolved, classes, pointer)
    rig = _build_rig(resolved, pointer)
    poses, reference = _build_trajectory(resolved, pointer)

    extent = np.asarray(dims, dtype=np.float64) * vs
    objects = objects + _jitter_objects(resolved, classes, rng, origin, extent)
    resolved["objects"] = objects
    resolved["jitter_objects"] = 0

    num_classes = len(classes)
    grids = [
        OccupancyGrid(dims, _voxelize(objects, dims, origin, vs, f - reference, num_classes), num_classes)  # type: ignore[arg-type]
        for f in range(len(poses))
    ]
    scene = Scene(
        spec=resolved,
        seed=seed,
        classes=classes,
        dims=dims,  # type: ignore[arg-type]
        origin=origin,
        voxel_size=vs,
        grids=grids,
        ego_poses=poses,
        rig=rig,
        reference=reference,
    )
    if resolved.get("profile") == "ablation":
        _check_ablation(scene)
    LOG.info(
        "シーン生成: dims=%s classes=%d frames=%d cameras=%d occupied=%d",
        dims,
        num_classes,
        len(poses),
        len(rig),
        int(scene.reference_grid.occupied().sum()),
    )
    return scene


# ---------------------------------------------------------------------------#
# レイキャスト
# ---------------------------------------------------------------------------#
def cast_rays(
    grid: OccupancyGrid,
    origin: np.ndarray,
    voxel_size: float,
    origins: np.ndarray,
    directions: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    グリッドをボクセル単位で厳密に走査し、最初の占有ボクセルのクラスと進入距離を返す。

    当たらないレイはクラス −1、深度 NaN。全レイを同時に 1 ボクセルずつ進める。
    """
    origin = np.asarray(origin, dtype=np.float64)
    dims = np.asarray(grid.dims)
    n = len(origins)
    cls = np.full(n, -1, dtype=np.int64)
    depth = np.full(n, np.nan)
    box = Box(tuple(origin.tolist()), tuple((origin + dims * voxel_size).tolist()))
    t0, t1, hit = intersect_box(origins, directions, np.zeros(n), np.full(n, np.inf), box)
    rays = np.flatnonzero(hit)
    if len(rays) == 0:
        return cls, depth

    o = origins[rays]
    d = directions[rays]
    t_entry = t0[rays].copy()
    t_end = t1[rays]
    p = o + t_entry[:, None] * d
    g = np.floor((p - origin) / voxel_size).astype(np.int64)
    g = np.clip(g, 0, dims - 1)
    step = np.sign(d).astype(np.int64)
    moving = d != 0.0
    safe_d = np.where(moving, d, 1.0)
    boundary = origin + (g + (step > 0)) * voxel_size
    t_max = np.where(moving, (boundary - o) / safe_d, np.inf)
    t_delta = np.where(moving, voxel_size / np.abs(safe_d), np.inf)

    active = np.ones(len(rays), dtype=bool)
    labels = grid.labels
    empty = grid.empty_label
    for _ in range(int(dims.sum()) + 3):
        a = np.flatnonzero(active)
        if len(a) == 0:
            break
        lab = labels[g[a, 0], g[a, 1], g[a, 2]]
        occ = lab != empty
        hit_rows = a[occ]
        cls[rays[hit_rows]] = lab[occ]
        depth[rays[hit_rows]] = t_entry[hit_rows]
        active[hit_rows] = False
        rest = a[~occ]
        if len(rest) == 0:
            break
        axis = np.argmin(t_max[rest], axis=1)
        t_entry[rest] = t_max[rest, axis]
        g[rest, axis] += step[rest, axis]
        t_max[rest, axis] += t_delta[rest, axis]
        out = (g[rest, axis] < 0) | (g[rest, axis] >= dims[axis]) | (t_entry[rest] >= t_end[rest])
        active[rest[out]] = False
    return cls, depth


def raycast_labels(scene: Scene, frame: int, camera: int) -> LabelImage:
    """フレーム frame の GT グリッドに対してカメラ camera の全画素を走査する。"""
    origins, dirs = scene.camera_rays(frame, camera)
    cls, depth = cast_rays(scene.grids[frame], scene.origin, scene.voxel_size, origins, dirs)
    cam = scene.rig[camera].intrinsics
    sem = np.where(cls < 0, scene.free_class, cls).reshape(cam.height, cam.width)
    return LabelImage(sem, depth.reshape(cam.height, cam.width), scene.free_class)


def grid_to_field(
    grid: OccupancyGrid,
    origin: np.ndarray,
    voxel_size: float,
    *,
    density: float = 1000.0,
    logit: float = 20.0,
) -> SemanticDensityField:
    """GT グリッドを飽和したフィールドへ変換する（占有: σ ≈ density、空: σ ≈ 0）。"""
    occupied = grid.occupied()
    dens = np.where(occupied, density, -density)
    sem = np.zeros(grid.dims + (grid.num_classes,))
    idx = np.where(occupied, grid.labels, 0)
    np.put_along_axis(sem, idx[..., None], logit, axis=-1)
    sem[~occupied] = 0.0
    return SemanticDensityField(
        dims=grid.dims,
        num_classes=grid.num_classes,
        origin=np.asarray(origin, dtype=np.float64),
        voxel_size=voxel_size,
        density_params=dens,
        semantic_params=sem,
    )


# ---------------------------------------------------------------------------#
# 保存と読み込み
# ---------------------------------------------------------------------------#
def _label_paths(frame: int, camera: int) -> Dict[str, str]:
    stem = f"labels/f{frame:03d}_c{camera}"
    return {"sem": f"{stem}_sem.pgm", "depth": f"{stem}_depth.pgm", "color": f"{stem}_sem.ppm"}


def save_scene(scene: Scene, out_dir: Union[str, Path], *, color: bool = True) -> Dict[str, Any]:
    """OCC1 グリッド・ラベル PGM・マニフェストを書き出し、マニフェストを返す。"""
    out = Path(out_dir)
    (out / "grids").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    scene.ensure_labels()

    frames = []
    for f, (grid, pose) in enumerate(zip(scene.grids, scene.ego_poses)):
        rel = f"grids/frame_{f:03d}.occ"
        write_occ(out / rel, grid)
        frames.append({"index": f, "ego_pose": pose.to_json(), "grid": rel})

    labels = []
    for f in range(scene.frame_count):
        for c in range(len(scene.rig)):
            img = scene.label_image(f, c)
            paths = _label_paths(f, c)
            write_pgm(out / paths["sem"], img.sem.astype(np.uint8), maxval=255)
            write_pgm(out / paths["depth"], depth_to_mm(img.depth), maxval=65535)
            entry = {"frame": f, "camera": c, "sem": paths["sem"], "depth": paths["depth"]}
            if color:
                write_ppm(out / paths["color"], colorize(img.sem, scene.free_class))
                entry["color"] = paths["color"]
            labels.append(entry)

    manifest = {
        "version": MANIFEST_VERSION,
        "seed": scene.seed,
        "spec": scene.spec,
        "num_classes": scene.num_classes,
        "free_class": scene.free_class,
        "classes": [{"id": c.id, "name": c.name, "dynamic": c.dynamic} for c in scene.classes],
        "grid": {"dims": list(scene.dims), "origin": scene.origin.tolist(), "voxel_size": scene.voxel_size},
        "reference": scene.reference,
        "frames": frames,
        "rig": [cam.to_json() for cam in scene.rig],
        "labels": labels,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    LOG.info("シーンを保存しました: %s (labels=%d)", out, len(labels))
    return manifest


def load_scene(data_dir: Union[str, Path]) -> Scene:
    """save_scene の出力を読み込む。深度は mm 精度に丸められている。"""
    root = Path(data_dir)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"マニフェストが見つかりません: {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("version") != MANIFEST_VERSION:
        raise InputError(f"未対応のマニフェスト版です: {manifest.get('version')}")
    num_classes = int(manifest["num_classes"])
    classes = [ClassInfo(int(c["id"]), str(c["name"]), bool(c["dynamic"])) for c in manifest["classes"]]
    grids = [read_occ(root / fr["grid"], num_classes) for fr in manifest["frames"]]
    scene = Scene(
        spec=manifest["spec"],
        seed=int(manifest["seed"]),
        classes=classes,
        dims=tuple(manifest["grid"]["dims"]),  # type: ignore[arg-type]
        origin=np.asarray(manifest["grid"]["origin"], dtype=np.float64),
        voxel_size=float(manifest["grid"]["voxel_size"]),
        grids=grids,
        ego_poses=[Pose.from_json(fr["ego_pose"]) for fr in manifest["frames"]],
        rig=[Camera.from_json(c) for c in manifest["rig"]],
        reference=int(manifest["reference"]),
    )
    for entry in manifest["labels"]:
        sem = read_pgm(root / entry["sem"]).astype(np.int64)
        depth = mm_to_depth(read_pgm(root / entry["depth"]))
        scene.labels[(int(entry["frame"]), int(entry["camera"]))] = LabelImage(sem, depth, scene.free_class)
    LOG.info("シーンを読み込みました: %s (frames=%d)", root, scene.frame_count)
    return scene
