"""
最適化ループ: 重み付きバッチ抽出 → レンダリング → 損失 → 逆伝播 → Adam 更新。

パラメータとモーメントは更新のたびに float32 へ丸める。チェックポイント (SDF1 + MOM1)
は float32 で保存されるので、復元後の続きは中断しなかった実行とビット単位で一致する。
イテレーション i のバッチ乱数は (seed, i) から派生するため、乱数状態は保存しない。
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from common.errors import InputError, NumericalError
from common.evalio.formats import Moments, read_checkpoint, write_checkpoint, write_sdf
from common.evalio.metrics import EvalReport, evaluate
from common.gradients import loss_and_grad
from common.losses import LossReport
from common.raypool import RayPool, pool_from_scene, sample_indices
from common.runtime.config import RunConfig, TrainConfig
from common.runtime.workers import BlockExecutor
from common.sdf import OccupancyGrid, SemanticDensityField, init_field

if TYPE_CHECKING:  # pragma: no cover
    from common.synthworld import Scene

__all__ = [
    "Adam",
    "TrainState",
    "FitResult",
    "batch_rng",
    "train_step",
    "fit",
    "METRICS_NAME",
    "FIELD_NAME",
]

LOG = logging.getLogger(__name__)

METRICS_NAME = "metrics.jsonl"
FIELD_NAME = "field.sdf"
RUN_MANIFEST_NAME = "run_manifest.json"
CHECKPOINT_DIR = "checkpoints"

# ブロック番号と衝突しないバッチ抽出用のストリーム番号
_BATCH_STREAM = 0x7FFFFFFF


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def batch_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(iteration), _BATCH_STREAM])))


class Adam:
    """バイアス補正付き Adam。配列を受け取り新しい配列を返す（状態は呼び出し側が持つ）。"""

    def __init__(self, learning_rate: float = 1e-2, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not learning_rate > 0:
            raise InputError(f"learning_rate は正である必要があります: {learning_rate}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise InputError(f"beta1, beta2 は [0, 1) が必要です: {beta1}, {beta2}")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    @classmethod
    def from_config(cls, config: TrainConfig) -> "Adam":
        return cls(config.learning_rate, config.beta1, config.beta2, config.eps)

    def step(
        self, params: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """t は 1 始まりの更新回数。"""
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps), m, v


@dataclass
class TrainState:
    field: SemanticDensityField
    moments: Moments

    @classmethod
    def initial(cls, field: SemanticDensityField, seed: int) -> "TrainState":
        field = field.copy()
        field.density_params = _f32(field.density_params)
        field.semantic_params = _f32(field.semantic_params)
        return cls(field, Moments.zeros(field, seed=seed))

    @property
    def iteration(self) -> int:
        return int(self.moments.iteration)

    @property
    def seed(self) -> int:
        return int(self.moments.seed)

    def copy(self) -> "TrainState":
        return TrainState(self.field.copy(), self.moments.copy())


@dataclass
class FitResult:
    field: SemanticDensityField
    history: List[Dict] = dc_field(default_factory=list)
    loss_curve: List[float] = dc_field(default_factory=list)
    seg_curve: List[float] = dc_field(default_factory=list)
    final_eval: Optional[EvalReport] = None
    pool_summary: Dict = dc_field(default_factory=dict)


def _nonfinite_rays(result) -> List[int]:
    bad = ~np.isfinite(result.depth_pix) | ~np.all(np.isfinite(result.sem_pix), axis=-1) | ~np.isfinite(
        result.opacity
    )
    return [int(i) for i in np.flatnonzero(bad)]


def train_step(
    state: TrainState,
    pool: RayPool,
    config: RunConfig,
    *,
    executor: Optional[BlockExecutor] = None,
    gt_grid: Optional[OccupancyGrid] = None,
) -> Tuple[TrainState, LossReport]:
    """
    1 回の Adam 更新。入力の state は変更しない。

    損失・勾配・更新後のパラメータが有限でなければ NumericalError（プール内のレイ番号付き）。
    """
    it = state.iteration
    index = sample_indices(pool, config.raypool.rays_per_batch, batch_rng(state.seed, it))
    batch = pool.rays.take(index)
    report, grads, result = loss_and_grad(
        state.field,
        batch,
        config.losses,
        config.renderer,
        seed=state.seed,
        iteration=it,
        training=True,
        executor=executor,
        gt_grid=gt_grid,
    )
    if not report.is_finite() or not grads.is_finite():
        bad = _nonfinite_rays(result)
        raise NumericalError(
            f"損失または勾配が有限ではありません: {report.to_dict()}",
            iteration=it,
            ray_indices=[int(index[i]) for i in bad] if bad else [int(i) for i in index],
        )

    adam = Adam.from_config(config.trainer)
    mom = state.moments
    t = it + 1
    rho, m_d, v_d = adam.step(state.field.density_params, grads.d_density, mom.m_density, mom.v_density, t)
    sem, m_s, v_s = adam.step(state.field.semantic_params, grads.d_semantic, mom.m_semantic, mom.v_semantic, t)
    field = state.field.copy()
    field.density_params = _f32(rho)
    field.semantic_params = _f32(sem)
    moments = Moments(_f32(m_d), _f32(m_s), _f32(v_d), _f32(v_s), t, state.seed)
    if not (np.all(np.isfinite(field.density_params)) and np.all(np.isfinite(field.semantic_params))):
        raise NumericalError("更新後のパラメータが有限ではありません", iteration=it)
    LOG.debug("step %d: total=%.6f seg=%.6f depth=%.6f", it, report.total, report.l_seg, report.l_depth)
    return TrainState(field, moments), report


# ---------------------------------------------------------------------------#
# fit
# ---------------------------------------------------------------------------#
def _restore_metrics(path: Path, upto: int) -> None:
    """再開時、チェックポイントより後の記録を捨てる。"""
    if not path.exists():
        return
    kept = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip() and json.loads(line).get("iteration", 0) <= upto:
            kept.append(line)
    path.write_text("".join(k + "\n" for k in kept), encoding="utf-8")


def _progress_enabled(config: TrainConfig) -> bool:
    return bool(config.progress) and sys.stderr.isatty()


def fit(
    scene: "Scene",
    config: RunConfig,
    *,
    out_dir: Optional[Union[str, Path]] = None,
    workers: int = 1,
    resume: Optional[Union[str, Path]] = None,
    on_eval: Optional[Callable[[Dict], None]] = None,
) -> FitResult:
    """
    シーンのラベルからフィールドを学習する。

    out_dir を与えるとチェックポイント、metrics.jsonl、最終 field.sdf を書く。
    評価は eval_every の倍数のイテレーションで行う。
    """
    tcfg = config.trainer
    field = init_field(
        scene.dims, scene.num_classes, scene.origin, scene.voxel_size, tcfg.density_init, tcfg.logit_init
    )
    state = TrainState.initial(field, config.seed)
    if resume is not None:
        loaded, moments = read_checkpoint(resume)
        if loaded.dims != field.dims or loaded.num_classes != field.num_classes:
            raise InputError(f"チェックポイントの形状がシーンと一致しません: {loaded.dims} L={loaded.num_classes}")
        if moments.seed != config.seed:
            LOG.warning("チェックポイントのシード %d を使います（設定は %d）", moments.seed, config.seed)
        state = TrainState(loaded, moments)
        LOG.info("チェックポイントから再開: %s (iteration=%d)", resume, state.iteration)

    out = Path(out_dir) if out_dir is not None else None
    metrics_path = out / METRICS_NAME if out else None
    if out:
        (out / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
        if resume is not None:
            _restore_metrics(metrics_path, state.iteration)  # type: ignore[arg-type]
        else:
            metrics_path.write_text("", encoding="utf-8")  # type: ignore[union-attr]

    result = FitResult(field=state.field)
    if state.iteration >= tcfg.iterations:
        if out:
            write_sdf(out / FIELD_NAME, state.field)
        return result

    pool = pool_from_scene(scene, config.raypool)
    result.pool_summary = pool.summary()
    gt_grid = scene.reference_grid if config.losses.w_occ3d > 0 else None

    with BlockExecutor(workers, config.renderer.block_size) as executor:
        steps = range(state.iteration, tcfg.iterations)
        for _ in tqdm(steps, desc="train", unit="it", disable=not _progress_enabled(tcfg)):
            state, report = train_step(state, pool, config, executor=executor, gt_grid=gt_grid)
            result.loss_curve.append(report.total)
            result.seg_curve.append(report.l_seg)
            it = state.iteration
            if tcfg.eval_every and it % tcfg.eval_every == 0:
                ev = evaluate(
                    state.field,
                    scene,
                    tau=config.eval.tau,
                    free_as_empty=config.eval.free_as_empty,
                    renderer_config=config.renderer,
                    opacity_min=config.losses.opacity_min,
                    workers=workers,
                )
                record = {"iteration": it, "losses": report.to_dict(), **ev.to_dict()}
                result.history.append(record)
                result.final_eval = ev
                if metrics_path is not None:
                    with metrics_path.open("a", encoding="utf-8") as fh:
                        fh.write(json.dumps(record, sort_keys=True) + "\n")
                if on_eval is not None:
                    on_eval(record)
            if out and tcfg.checkpoint_every and it % tcfg.checkpoint_every == 0:
                write_checkpoint(out / CHECKPOINT_DIR / f"ckpt_{it:06d}.sdf", state.field, state.moments)

    result.field = state.field
    if out:
        write_sdf(out / FIELD_NAME, state.field)
    LOG.info("学習完了: iterations=%d final_loss=%s", state.iteration, result.loss_curve[-1] if result.loss_curve else None)
    return result
