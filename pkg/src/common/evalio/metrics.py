"""
評価指標: ボクセル mIoU、レンダリング画像の画素精度と深度誤差。

mIoU は予測か GT のどちらかに現れるクラスだけで平均する（空ラベルは除外）。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence

import numpy as np

from common.errors import InputError
from common.geometry import RayBatch
from common.renderer import clip_to_field, render_rays
from common.runtime.config import RendererConfig
from common.runtime.workers import BlockExecutor
from common.sdf import OccupancyGrid, SemanticDensityField, extract_occupancy

if TYPE_CHECKING:  # pragma: no cover
    from common.synthworld import Scene

__all__ = ["EvalReport", "voxel_miou", "render_eval", "evaluate"]

LOG = logging.getLogger(__name__)


@dataclass
class EvalReport:
    """
    per_class_iou は長さ L。予測・GT のどちらにも無いクラスは None。

    2D 指標は render_eval を通したときだけ埋まる。
    """

    per_class_iou: List[Optional[float]] = dc_field(default_factory=list)
    miou: float = 0.0
    classes_evaluated: List[int] = dc_field(default_factory=list)
    occupied_voxel_counts: Dict[str, int] = dc_field(default_factory=dict)
    sem_pixel_accuracy: Optional[float] = None
    depth_abs_rel: Optional[float] = None
    depth_rmse: Optional[float] = None
    pixel_count: int = 0
    depth_pixel_count: int = 0

    def to_dict(self) -> dict:
        return {
            "per_class_iou": list(self.per_class_iou),
            "miou": self.miou,
            "classes_evaluated": list(self.classes_evaluated),
            "occupied_voxel_counts": dict(self.occupied_voxel_counts),
            "sem_pixel_accuracy": self.sem_pixel_accuracy,
            "depth_abs_rel": self.depth_abs_rel,
            "depth_rmse": self.depth_rmse,
            "pixel_count": self.pixel_count,
            "depth_pixel_count": self.depth_pixel_count,
        }


def voxel_miou(pred: OccupancyGrid, gt: OccupancyGrid) -> EvalReport:
    if tuple(pred.dims) != tuple(gt.dims):
        raise InputError(f"pred と gt の dims が一致しません: {pred.dims} != {gt.dims}")
    num_classes = max(pred.num_classes, gt.num_classes)
    p = np.where(pred.occupied(), pred.labels, num_classes).reshape(-1)
    g = np.where(gt.occupied(), gt.labels, num_classes).reshape(-1)
    # 混同行列の対角と周辺和から IoU を求める
    conf = np.bincount(p * (num_classes + 1) + g, minlength=(num_classes + 1) ** 2).reshape(
        num_classes + 1, num_classes + 1
    )
    inter = np.diag(conf)[:num_classes]
    union = conf.sum(axis=1)[:num_classes] + conf.sum(axis=0)[:num_classes] - inter

    per_class: List[Optional[float]] = []
    evaluated = []
    for c in range(num_classes):
        if union[c] == 0:
            per_class.append(None)
            continue
        per_class.append(float(inter[c]) / float(union[c]))
        evaluated.append(c)
    miou = float(np.mean([per_class[c] for c in evaluated])) if evaluated else 0.0
    return EvalReport(
        per_class_iou=per_class,
        miou=miou,
        classes_evaluated=evaluated,
        occupied_voxel_counts={"pred": int(pred.occupied().sum()), "gt": int(gt.occupied().sum())},
    )


def _render_frame(
    field: SemanticDensityField,
    scene: "Scene",
    frame: int,
    cameras: Sequence[int],
    config: RendererConfig,
    opacity_min: float,
    executor: BlockExecutor,
):
    preds, depths, gts, gt_depths = [], [], [], []
    for cam in cameras:
        label = scene.label_image(frame, cam)
        origins, dirs = scene.camera_rays(frame, cam)
        n = len(origins)
        batch = RayBatch(
            origins=origins,
            directions=dirs,
            t_near=np.zeros(n),
            t_far=np.full(n, np.inf),
            frame_offset=np.zeros(n, dtype=np.int64),
            sem_label=np.full(n, -1),
            depth_label=np.full(n, np.nan),
        )
        clipped, hit = clip_to_field(field, batch)
        result = render_rays(field, clipped, config, training=False, executor=executor)
        pred = np.full(n, scene.free_class, dtype=np.int64)
        depth = np.zeros(n)
        if len(clipped):
            opaque = result.opacity >= opacity_min
            hit_pred = np.where(opaque, np.argmax(result.sem_pix, axis=-1), scene.free_class)
            pred[hit] = hit_pred
            depth[hit] = result.depth_pix
        preds.append(pred)
        depths.append(depth)
        gts.append(label.sem.reshape(-1))
        gt_depths.append(label.depth.reshape(-1))
    return np.concatenate(preds), np.concatenate(depths), np.concatenate(gts), np.concatenate(gt_depths)


def render_eval(
    field: SemanticDensityField,
    scene: "Scene",
    frame: int,
    *,
    renderer_config: Optional[RendererConfig] = None,
    opacity_min: float = 0.05,
    cameras: Optional[Sequence[int]] = None,
    workers: int = 1,
    report: Optional[EvalReport] = None,
) -> EvalReport:
    """
    フレーム frame の全画素をジッタ無しでレンダリングし、GT ラベル画像と比べる。

    予測クラスは不透明度が opacity_min 未満なら自由空間クラス、それ以外は argmax。
    深度誤差は GT 深度が有効な画素だけで計算する。
    """
    config = renderer_config or RendererConfig()
    if not 0 <= frame < scene.frame_count:
        raise InputError(f"フレーム {frame} は軌跡 [0, {scene.frame_count}) の範囲外です")
    cameras = list(range(len(scene.rig))) if cameras is None else list(cameras)
    with BlockExecutor(workers, config.block_size) as executor:
        pred, depth, gt, gt_depth = _render_frame(field, scene, frame, cameras, config, opacity_min, executor)

    report = report or EvalReport()
    report.pixel_count = len(gt)
    report.sem_pixel_accuracy = float(np.mean(pred == gt)) if len(gt) else None
    valid = np.isfinite(gt_depth)
    report.depth_pixel_count = int(valid.sum())
    if report.depth_pixel_count:
        # 透明な画素の予測深度 0 はそのまま誤差に入れる
        err = depth[valid] - gt_depth[valid]
        report.depth_abs_rel = float(np.mean(np.abs(err) / gt_depth[valid]))
        report.depth_rmse = float(np.sqrt(np.mean(err * err)))
    LOG.debug(
        "render_eval: frame=%d pixels=%d acc=%s abs_rel=%s",
        frame,
        report.pixel_count,
        report.sem_pixel_accuracy,
        report.depth_abs_rel,
    )
    return report


def evaluate(
    field: SemanticDensityField,
    scene: "Scene",
    *,
    tau: float = 0.2,
    free_as_empty: bool = True,
    renderer_config: Optional[RendererConfig] = None,
    opacity_min: float = 0.05,
    frame: Optional[int] = None,
    workers: int = 1,
) -> EvalReport:
    """参照フレームの GT グリッドに対する mIoU と、フレームの 2D 指標をまとめて返す。"""
    pred = extract_occupancy(field, tau, free_class=scene.free_class if free_as_empty else None)
    report = voxel_miou(pred, scene.reference_grid)
    report = render_eval(
        field,
        scene,
        scene.reference if frame is None else frame,
        renderer_config=renderer_config,
        opacity_min=opacity_min,
        workers=workers,
        report=report,
    )
    LOG.info("評価: mIoU=%.4f acc=%.4f", report.miou, report.sem_pixel_accuracy or 0.0)
    return report
