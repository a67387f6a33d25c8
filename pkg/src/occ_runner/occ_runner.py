#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Config-driven occupancy runner
- Commands: gen-scene / train / extract-occ / eval / check-grad / render / info /
  config-schema / ablate
- 結果は JSON で stdout へ、成果物はファイルへ、ログは stderr へ出す。
Exit codes: 0 成功 / 2 入力エラー / 3 数値エラー / 4 形式エラー
"""
import argparse
import copy
import json
import logging
import statistics
import sys
from pathlib import Path
from typing import Any, Dict, List, MutableMapping, Optional, Sequence

SRC_DIR = Path(__file__).resolve().parents[1]
ROOT_DIR = SRC_DIR.parent
src_str = str(SRC_DIR)
if src_str in sys.path:
    sys.path.remove(src_str)
sys.path.insert(0, src_str)

import numpy as np

from common.errors import EXIT_INPUT, InputError, NumericalError, OccRenderError
from common.evalio import (
    EvalReport,
    colorize,
    decode_mom,
    decode_sdf,
    depth_to_mm,
    evaluate,
    peek_occ_max_label,
    read_occ,
    read_pgm,
    read_ppm,
    read_sdf,
    render_eval,
    sniff,
    voxel_miou,
    write_occ,
    write_pgm,
    write_ppm,
)
from common.evalio.formats import MOM_MAGIC, OCC_MAGIC, SDF_MAGIC
from common.geometry import RayBatch
from common.gradients import fd_check, make_check_problem
from common.jobs import Job, JobFactory
from common.platform import EnvironmentAdapter
from common.renderer import render_batch
from common.runtime import ConfigLoader, JobDispatcher, RunConfig, VisualizationController, config_schema
from common.runtime.config import apply_overrides, build_config, resolve_workers
from common.sdf import extract_occupancy
from common.synthworld import Scene, gen_scene, load_scene, save_scene
from common.trainer import RUN_MANIFEST_NAME, fit

LOG = logging.getLogger("occ_runner")

# ablate の組み込みラダー（各要素は --set 形式の上書き）
LADDERS: Dict[str, List[Dict[str, Any]]] = {
    "table3": [
        {"type": "train_variant", "name": "seg-only", "set": ["losses.w_depth=0", "raypool.m_aux=0", "raypool.weighted=false"]},
        {"type": "train_variant", "name": "+depth", "set": ["raypool.m_aux=0", "raypool.weighted=false"]},
        {"type": "train_variant", "name": "+aux", "set": ["raypool.m_aux=6", "raypool.weighted=false"]},
        {"type": "train_variant", "name": "+wrs", "set": ["raypool.m_aux=6", "raypool.weighted=true"]},
    ],
    "table4": [
        {"type": "train_variant", "name": "unified-1.0", "set": ["renderer.sampler=unified", "renderer.step_scale=1.0"]},
        {"type": "train_variant", "name": "unified-0.5", "set": ["renderer.sampler=unified", "renderer.step_scale=0.5"]},
        {
            "type": "train_variant",
            "name": "hierarchical-64-128",
            "set": ["renderer.sampler=hierarchical", "renderer.n_coarse=64", "renderer.n_fine=128"],
        },
    ],
}


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"JSON にできない型です: {type(obj).__name__}")


def _deep_merge(base: Dict[str, Any], over: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def emit(payload: Any) -> None:
    """機械可読な結果を stdout へ。"""
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
    sys.stdout.flush()


# ========= ジョブ =========
class TrainVariantJob(Job):
    """上書きを適用した設定で複数シード分の学習を行い、mIoU を集計するジョブ。"""

    def _base(self, context: MutableMapping[str, Any]) -> Dict[str, Any]:
        data = copy.deepcopy(context["base"])
        if self.config.get("config"):
            env: EnvironmentAdapter = context.get("env") or EnvironmentAdapter()
            path = env.resolve_resource_path(str(self.config["config"]), context)
            variant = ConfigLoader().load_raw(str(path))
            LOG.debug("variant %s: config %s", self.name, path)
            data = _deep_merge(data, variant)
        return data

    def execute(self, *, context: MutableMapping[str, Any]) -> Dict[str, Any]:
        overrides = list(self.config.get("set", []))
        seeds: Sequence[int] = context["seeds"]
        scene: Scene = context["scene"]
        out_dir = Path(context["out_dir"]) / self.name
        base = self._base(context)
        mious = []
        for seed in seeds:
            data = copy.deepcopy(base)
            apply_overrides(data, overrides)
            data["seed"] = int(seed)
            cfg = build_config(data)
            cfg.trainer.progress = False
            result = fit(scene, cfg, out_dir=out_dir / f"seed_{seed}", workers=context["workers"])
            report = evaluate(
                result.field,
                scene,
                tau=cfg.eval.tau,
                free_as_empty=cfg.eval.free_as_empty,
                renderer_config=cfg.renderer,
                opacity_min=cfg.losses.opacity_min,
                workers=context["workers"],
            )
            mious.append(report.miou)
            LOG.info("variant %s seed=%d mIoU=%.4f", self.name, seed, report.miou)
        summary = {
            "name": self.name,
            "set": overrides,
            "seeds": list(seeds),
            "miou": mious,
            "median_miou": statistics.median(mious) if mious else None,
        }
        context.setdefault("results", []).append(summary)
        return summary


def build_occ_job_factory() -> JobFactory:
    factory = JobFactory()
    factory.register("train_variant", lambda cfg: TrainVariantJob(cfg))
    return factory


# ========= アプリケーション =========
class OccRunnerApp:
    """occ ランナーのオーケストレーション。サブコマンドごとに cmd_* を呼ぶ。"""

    def __init__(self, args, env: Optional[EnvironmentAdapter] = None):
        self.args = args
        self.env = env or EnvironmentAdapter()
        self._config_loader = ConfigLoader()

    def run(self) -> None:
        handler = getattr(self, "cmd_" + self.args.command.replace("-", "_"))
        handler()

    # ---- 共通 ----
    def _load_config(self) -> RunConfig:
        overrides = list(getattr(self.args, "set", None) or [])
        if getattr(self.args, "seed", None) is not None:
            overrides.append(f"seed={self.args.seed}")
        if getattr(self.args, "iterations", None) is not None:
            overrides.append(f"trainer.iterations={self.args.iterations}")
        return self._config_loader.load(getattr(self.args, "config", None), overrides=overrides)

    def _workers(self, cfg: RunConfig) -> int:
        value = resolve_workers(getattr(self.args, "workers", None), cfg, getenv=self.env.getenv)
        LOG.debug("workers=%d", value)
        return value

    def _scene(self, cfg: RunConfig) -> Scene:
        data = getattr(self.args, "data", None)
        if data:
            return load_scene(self.env.normalize_path(data))
        spec = dict(cfg.scene.spec or {})
        spec.setdefault("profile", cfg.scene.profile)
        return gen_scene(spec, seed=cfg.seed)

    # ---- gen-scene ----
    def cmd_gen_scene(self) -> None:
        cfg = self._load_config()
        if self.args.spec:
            spec = self._config_loader.load_raw(self.env.normalize_path(self.args.spec))
        else:
            spec = dict(cfg.scene.spec or {})
            spec.setdefault("profile", self.args.profile or cfg.scene.profile)
        scene = gen_scene(spec, seed=cfg.seed)
        manifest = save_scene(scene, self.env.normalize_path(self.args.out), color=not self.args.no_color)
        emit(
            {
                "out": self.args.out,
                "frames": len(manifest["frames"]),
                "cameras": len(manifest["rig"]),
                "labels": len(manifest["labels"]),
                "num_classes": manifest["num_classes"],
                "occupied_voxels": int(scene.reference_grid.occupied().sum()),
            }
        )

    # ---- train ----
    def cmd_train(self) -> None:
        cfg = self._load_config()
        workers = self._workers(cfg)
        scene = self._scene(cfg)
        out = Path(self.env.normalize_path(self.args.out))
        out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "config": cfg.to_dict(),
            "platform": self.env.get_platform_info(),
            "data": self.env.normalize_path(self.args.data) if self.args.data else None,
            "resume": self.args.resume,
            "scene": {
                "dims": list(scene.dims),
                "num_classes": scene.num_classes,
                "frames": scene.frame_count,
                "reference": scene.reference,
            },
        }
        (out / RUN_MANIFEST_NAME).write_text(
            json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8"
        )
        result = fit(scene, cfg, out_dir=out, workers=workers, resume=self.args.resume)
        VisualizationController(
            default_title="training loss",
            skip_message="損失曲線の表示をスキップしました（--plot で表示）",
        ).plot_losses(result.loss_curve, show=self.args.plot, save_path=out / "loss.png" if self.args.plot else None)
        emit(
            {
                "out": str(out),
                "iterations": cfg.trainer.iterations,
                "final_loss": result.loss_curve[-1] if result.loss_curve else None,
                "initial_loss": result.loss_curve[0] if result.loss_curve else None,
                "final_eval": result.final_eval.to_dict() if result.final_eval else None,
                "pool": result.pool_summary,
            }
        )

    # ---- extract-occ ----
    def cmd_extract_occ(self) -> None:
        cfg = self._load_config()
        field = read_sdf(self.env.normalize_path(self.args.field))
        tau = cfg.eval.tau if self.args.tau is None else self.args.tau
        free = field.num_classes - 1 if self.args.free_as_empty else None
        grid = extract_occupancy(field, tau, free_class=free)
        if self.args.out:
            write_occ(self.env.normalize_path(self.args.out), grid)
        occupied = grid.occupied()
        emit(
            {
                "tau": tau,
                "num_classes": field.num_classes,
                "occupied_voxels": int(occupied.sum()),
                "empty_voxels": int((~occupied).sum()),
                "class_counts": np.bincount(grid.labels[occupied], minlength=field.num_classes).tolist(),
                "out": self.args.out,
            }
        )

    # ---- eval ----
    def _infer_num_classes(self, paths: Sequence[str]) -> int:
        if self.args.num_classes is not None:
            return int(self.args.num_classes)
        if self.args.data:
            return load_scene(self.env.normalize_path(self.args.data)).num_classes
        # 空ボクセルを含むグリッドでは最大ラベル = 空ラベル = L
        labels = [peek_occ_max_label(Path(self.env.normalize_path(p)).read_bytes()) for p in paths]
        LOG.warning("num_classes をラベル最大値 %d から推定しました（--num-classes で明示できます）", max(labels))
        return max(labels)

    def cmd_eval(self) -> None:
        cfg = self._load_config()
        for p in (self.args.pred, self.args.gt):
            if not Path(self.env.normalize_path(p)).exists():
                raise FileNotFoundError(f"ファイルが見つかりません: {p}")
        num_classes = self._infer_num_classes([self.args.pred, self.args.gt])
        pred = read_occ(self.env.normalize_path(self.args.pred), num_classes)
        gt = read_occ(self.env.normalize_path(self.args.gt), num_classes)
        report: EvalReport = voxel_miou(pred, gt)
        if self.args.field:
            if not self.args.data:
                raise InputError("--field には --data（シーン）が必要です")
            field = read_sdf(self.env.normalize_path(self.args.field))
            scene = load_scene(self.env.normalize_path(self.args.data))
            frame = scene.reference if self.args.frame is None else self.args.frame
            report = render_eval(
                field,
                scene,
                frame,
                renderer_config=cfg.renderer,
                opacity_min=cfg.losses.opacity_min,
                workers=self._workers(cfg),
                report=report,
            )
        emit(report.to_dict())

    # ---- check-grad ----
    def cmd_check_grad(self) -> None:
        cfg = self._load_config()
        dims = tuple(self.args.dims)
        field, rays, gt = make_check_problem(
            cfg.seed, dims=dims, num_classes=self.args.num_classes, n_rays=self.args.rays  # type: ignore[arg-type]
        )
        report = fd_check(field, rays, cfg.losses, self.args.h, renderer_config=cfg.renderer, gt_grid=gt)
        emit(report.to_dict())
        if not report.passed:
            raise NumericalError(
                f"解析勾配と差分が一致しません: max_rel={report.max_rel_error:.3e} offending={len(report.offending)}"
            )

    def _render_scene(self, field_path: Path) -> Scene:
        """--data が無ければフィールドと同じディレクトリの run manifest からシーンを復元する。"""
        if self.args.data:
            return load_scene(self.env.normalize_path(self.args.data))
        manifest_path = field_path.parent / RUN_MANIFEST_NAME
        if not manifest_path.exists():
            raise InputError(f"--data が無く、{manifest_path} もありません（train の出力か --data を指定してください）")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        if manifest.get("data"):
            LOG.debug("render: scene from manifest data %s", manifest["data"])
            return load_scene(manifest["data"])
        cfg = build_config(manifest["config"])
        LOG.debug("render: regenerating scene from manifest config (seed=%d)", cfg.seed)
        return self._scene(cfg)

    # ---- render ----
    def cmd_render(self) -> None:
        cfg = self._load_config()
        field_path = Path(self.env.normalize_path(self.args.field))
        field = read_sdf(field_path)
        scene = self._render_scene(field_path)
        if not 0 <= self.args.cam < len(scene.rig):
            raise InputError(f"カメラ {self.args.cam} は [0, {len(scene.rig)}) の範囲外です")
        origins, dirs = scene.camera_rays(self.args.frame, self.args.cam)
        n = len(origins)
        rays = RayBatch(
            origins=origins,
            directions=dirs,
            t_near=np.zeros(n),
            t_far=np.full(n, np.inf),
            frame_offset=np.zeros(n, dtype=np.int64),
            sem_label=np.full(n, -1),
            depth_label=np.full(n, np.nan),
        )
        outputs = render_batch(field, rays, cfg.renderer, training=False, workers=self._workers(cfg))
        opacity = np.array([o.opacity for o in outputs])
        opaque = opacity >= cfg.losses.opacity_min
        free = field.num_classes - 1
        cam = scene.rig[self.args.cam].intrinsics
        sem = np.where(opaque, [int(np.argmax(o.sem_pix)) for o in outputs], free).reshape(cam.height, cam.width)
        depth = np.where(opaque, [o.depth_pix for o in outputs], np.nan).reshape(cam.height, cam.width)

        out = Path(self.env.normalize_path(self.args.out))
        out.mkdir(parents=True, exist_ok=True)
        stem = f"render_f{self.args.frame:03d}_c{self.args.cam}"
        write_pgm(out / f"{stem}_sem.pgm", sem.astype(np.uint8), maxval=255)
        write_pgm(out / f"{stem}_depth.pgm", depth_to_mm(depth), maxval=65535)
        write_ppm(out / f"{stem}_sem.ppm", colorize(sem, free))
        gt = scene.labels.get((self.args.frame, self.args.cam))
        VisualizationController(
            default_title=stem,
            skip_message="レンダリング結果の表示をスキップしました（--show で表示）",
        ).show_labels(sem, depth, free, gt_sem=gt.sem if gt is not None else None, show=self.args.show)
        emit(
            {
                "out": str(out),
                "files": [f"{stem}_sem.pgm", f"{stem}_depth.pgm", f"{stem}_sem.ppm"],
                "mean_opacity": float(opacity.mean()) if n else 0.0,
                "pixel_accuracy": float(np.mean(sem == gt.sem)) if gt is not None else None,
            }
        )

    # ---- info ----
    def cmd_info(self) -> None:
        path = Path(self.env.normalize_path(self.args.file))
        if not path.exists():
            raise FileNotFoundError(f"ファイルが見つかりません: {self.args.file}")
        if path.is_dir() or path.name == "manifest.json":
            scene = load_scene(path if path.is_dir() else path.parent)
            emit(
                {
                    "kind": "scene",
                    "frames": scene.frame_count,
                    "cameras": len(scene.rig),
                    "dims": list(scene.dims),
                    "voxel_size": scene.voxel_size,
                    "classes": [c.name for c in scene.classes],
                    "reference": scene.reference,
                }
            )
            return
        magic = sniff(path)
        buf = path.read_bytes()
        if magic == SDF_MAGIC:
            field, pos = decode_sdf(buf)
            info: Dict[str, Any] = {
                "kind": "SDF1",
                "dims": list(field.dims),
                "num_classes": field.num_classes,
                "origin": field.origin.tolist(),
                "voxel_size": field.voxel_size,
                "sigma_min": float(field.sigma().min()),
                "sigma_max": float(field.sigma().max()),
                "bytes": len(buf),
            }
            if buf[pos : pos + 4] == MOM_MAGIC:
                moments, _ = decode_mom(buf, pos)
                info.update(kind="checkpoint", iteration=moments.iteration, seed=moments.seed)
            emit(info)
        elif magic == OCC_MAGIC:
            max_label = peek_occ_max_label(buf)
            grid = read_occ(path, max(max_label, 1))
            values, counts = np.unique(grid.labels, return_counts=True)
            emit(
                {
                    "kind": "OCC1",
                    "dims": list(grid.dims),
                    "max_label": max_label,
                    "label_counts": {str(int(v)): int(c) for v, c in zip(values, counts)},
                }
            )
        elif magic[:2] == b"P5":
            img = read_pgm(path)
            emit({"kind": "P5", "width": img.shape[1], "height": img.shape[0], "bits": img.dtype.itemsize * 8})
        elif magic[:2] == b"P6":
            img = read_ppm(path)
            emit({"kind": "P6", "width": img.shape[1], "height": img.shape[0], "bits": 8})
        else:
            raise InputError(f"未知のファイル形式です: magic={magic!r}")

    # ---- config-schema ----
    def cmd_config_schema(self) -> None:
        emit(config_schema())

    # ---- ablate ----
    def cmd_ablate(self) -> None:
        raw = self._config_loader.load_raw(self.args.config)
        apply_overrides(raw, list(self.args.set or []))
        if self.args.seed is not None:
            raw["seed"] = self.args.seed
        if self.args.ladder:
            raw["jobs"] = copy.deepcopy(LADDERS[self.args.ladder])
        cfg = build_config(raw)
        if not cfg.jobs:
            raise InputError("ablate には jobs（または --ladder）が必要です")
        workers = self._workers(cfg)
        scene = self._scene(cfg)
        base = {k: v for k, v in raw.items() if k != "jobs"}
        context: Dict[str, Any] = {
            "base": base,
            "scene": scene,
            "seeds": [cfg.seed + i for i in range(self.args.seeds)],
            "workers": workers,
            "out_dir": self.env.normalize_path(self.args.out),
            "results": [],
            "config_dir": Path(self.args.config).resolve().parent if self.args.config else Path.cwd(),
            "project_root": ROOT_DIR,
            "env": self.env,
        }
        JobDispatcher(build_occ_job_factory()).dispatch_jobs(cfg.jobs, context=context)
        table = {"seeds": context["seeds"], "variants": context["results"]}
        out = Path(context["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        emit(table)


# ========= 引数 =========
def _schema_epilog() -> str:
    lines = ["config keys (--set section.key=value で上書き):"]
    for entry in config_schema():
        default = json.dumps(entry["default"], ensure_ascii=False, default=_json_default)
        lines.append(f"  {entry['key']} ({entry['type']}, default={default}): {entry['doc']}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON/YAML config path")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="設定の上書き（複数可）")
    common.add_argument("--seed", type=int, help="乱数シード（設定の seed を上書き）")
    common.add_argument("--workers", type=int, help="ワーカー数（既定: 設定 → $OCCRENDER_WORKERS → 1）")
    common.add_argument("--debug", action="store_true", help="[DEBUG]出力を有効化")

    ap = argparse.ArgumentParser(
        prog="occ-runner",
        description="Semantic density field renderer / trainer",
        epilog=_schema_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", parents=[common], help="合成シーンとラベルを生成")
    p.add_argument("--spec", help="シーン仕様 JSON")
    p.add_argument("--profile", choices=["default", "ablation", "front-view", "tiny"])
    p.add_argument("--out", required=True)
    p.add_argument("--no-color", action="store_true", help="カラー PPM を書かない")

    p = sub.add_parser(
        "train",
        parents=[common],
        help="フィールドを学習",
        epilog=_schema_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--data", help="gen-scene の出力ディレクトリ（省略時は設定の scene から生成）")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume", help="再開するチェックポイント")
    p.add_argument("--plot", action="store_true", help="損失曲線を表示")

    p = sub.add_parser("extract-occ", parents=[common], help="σ しきい値で占有グリッドを抽出")
    p.add_argument("--field", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--out")
    p.add_argument("--free-as-empty", action="store_true", help="argmax が自由空間クラスのボクセルも空にする")

    p = sub.add_parser("eval", parents=[common], help="占有グリッドの mIoU（と 2D 指標）")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--num-classes", type=int, help="L（省略時は --data かラベル最大値から推定）")
    p.add_argument("--data")
    p.add_argument("--field", help="2D 指標用のフィールド")
    p.add_argument("--frame", type=int)

    p = sub.add_parser("check-grad", parents=[common], help="解析勾配を中心差分で検証")
    p.add_argument("--dims", type=int, nargs=3, default=[4, 4, 4])
    p.add_argument("--num-classes", type=int, default=5)
    p.add_argument("--rays", type=int, default=8)
    p.add_argument("--h", type=float, default=1e-4)

    p = sub.add_parser("render", parents=[common], help="フィールドを 1 カメラ分レンダリング")
    p.add_argument("--field", required=True)
    p.add_argument("--data", help="gen-scene の出力（省略時はフィールド隣の run_manifest.json から復元）")
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--cam", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--show", action="store_true")

    p = sub.add_parser("info", parents=[common], help="ファイルの要約")
    p.add_argument("--file", required=True)

    sub.add_parser("config-schema", parents=[common], help="設定スキーマを JSON で出力")

    p = sub.add_parser("ablate", parents=[common], help="学習バリアントを比較")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--ladder", choices=sorted(LADDERS))
    return ap


def main(argv: Optional[Sequence[str]] = None) -> None:
    args = build_parser().parse_args(argv)

    # --- ログレベル設定 ---
    level = logging.DEBUG if args.debug else logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s [%(levelname)s] %(message)s")

    try:
        OccRunnerApp(args).run()
    except OccRenderError as exc:
        LOG.error("%s", exc)
        raise SystemExit(exc.exit_code) from exc
    except FileNotFoundError as exc:
        LOG.error("%s", exc)
        raise SystemExit(EXIT_INPUT) from exc


if __name__ == "__main__":
    main()
