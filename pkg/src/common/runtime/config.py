"""
ランタイム構成要素: 設定スキーマと設定ロード。

設定ドキュメントは JSON（YAML の部分集合なので `yaml.safe_load` でそのまま読める）。
各セクションは dataclass で表し、既定値と説明は field の metadata に持たせる。
未知のキー・型違い・範囲外の値は JSON ポインタ付きの `ConfigError` になる。
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, MutableMapping, Optional, Sequence, Union, get_args, get_origin, get_type_hints

import yaml

from common.errors import ConfigError

__all__ = [
    "ConfigLoader",
    "RendererConfig",
    "LossConfig",
    "RayPoolConfig",
    "TrainConfig",
    "EvalConfig",
    "SceneConfig",
    "RunConfig",
    "apply_overrides",
    "build_config",
    "config_schema",
    "resolve_workers",
]

LOG = logging.getLogger(__name__)

WORKERS_ENV = "OCCRENDER_WORKERS"


def _opt(default: Any, doc: str, **extra: Any) -> Any:
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda: type(default)(default), metadata={"doc": doc, **extra})
    return field(default=default, metadata={"doc": doc, **extra})


def _fail(pointer: str, message: str) -> None:
    raise ConfigError(message, pointer=pointer)


# ---------------------------------------------------------------------------#
# セクション定義
# ---------------------------------------------------------------------------#
@dataclass
class RendererConfig:
    sampler: str = _opt("unified", "サンプラ: unified | hierarchical", choices=("unified", "hierarchical"))
    step_scale: float = _opt(0.5, "unified のステップ幅（voxel_size の倍数）")
    n_coarse: int = _opt(64, "hierarchical の粗サンプル数")
    n_fine: int = _opt(128, "hierarchical の追加サンプル数")
    jitter: bool = _opt(True, "学習時にビン内ジッタを掛ける")
    interpolation: str = _opt(
        "trilinear", "問い合わせ補間: trilinear | nearest（デバッグ用）", choices=("trilinear", "nearest")
    )
    sem_accumulation: str = _opt(
        "logits", "意味の累積方式: logits（既定）| probs（点ごとに softmax）", choices=("logits", "probs")
    )
    block_size: int = _opt(256, "決定的な作業ブロックあたりのレイ数")

    def _validate(self, pointer: str) -> None:
        if not self.step_scale > 0:
            _fail(f"{pointer}/step_scale", "正の値が必要です")
        for key in ("n_coarse", "n_fine", "block_size"):
            if getattr(self, key) < 1:
                _fail(f"{pointer}/{key}", "1 以上が必要です")

    def as_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class LossConfig:
    w_seg: float = _opt(1.0, "意味 cross-entropy の重み")
    w_depth: float = _opt(1.0, "SILog 深度損失の重み")
    w_dist: float = _opt(0.01, "distortion 正則化の重み")
    w_tv: float = _opt(0.01, "TV 正則化の重み")
    w_occ3d: float = _opt(0.0, "3D 占有教師（参照フレームの GT グリッド）の重み")
    lambda_var: float = _opt(0.85, "SILog の分散項係数")
    opacity_min: float = _opt(0.05, "深度損失に使うレイの最小不透明度")

    def _validate(self, pointer: str) -> None:
        for key in ("w_seg", "w_depth", "w_dist", "w_tv", "w_occ3d"):
            if getattr(self, key) < 0:
                _fail(f"{pointer}/{key}", "非負の値が必要です")
        if not 0.0 <= self.lambda_var <= 1.0:
            _fail(f"{pointer}/lambda_var", "[0, 1] の範囲で指定してください")
        if not 0.0 <= self.opacity_min <= 1.0:
            _fail(f"{pointer}/opacity_min", "[0, 1] の範囲で指定してください")


@dataclass
class RayPoolConfig:
    m_aux: int = _opt(6, "補助フレーム数（偶数）")
    rays_per_batch: int = _opt(4096, "1 バッチのレイ数")
    lambda_s: float = _opt(0.5, "クラス頻度バランス重みの係数")
    lambda_dyn: float = _opt(0.1, "補助レイ（動的クラス）の時間重み")
    lambda_adj: float = _opt(0.7, "補助レイ（静的クラス）の時間重み")
    w_max: float = _opt(100.0, "バランス重みの上限")
    dynamic_classes: Optional[List[int]] = _opt(None, "動的クラス ID（null ならシーンの定義）")
    with_replacement: bool = _opt(True, "復元抽出でバッチを引く")
    weighted: bool = _opt(True, "重み付きサンプリング（false なら一様）")
    current_index: Optional[int] = _opt(None, "現フレーム番号（null ならシーンの参照フレーム）")

    def _validate(self, pointer: str) -> None:
        if self.m_aux < 0 or self.m_aux % 2:
            _fail(f"{pointer}/m_aux", "0 以上の偶数が必要です")
        if self.rays_per_batch < 1:
            _fail(f"{pointer}/rays_per_batch", "1 以上が必要です")
        if self.lambda_s < 0:
            _fail(f"{pointer}/lambda_s", "非負の値が必要です")
        if not 0.0 < self.lambda_dyn <= 1.0:
            _fail(f"{pointer}/lambda_dyn", "(0, 1] の範囲で指定してください")
        if not 0.0 < self.lambda_adj <= 1.0:
            _fail(f"{pointer}/lambda_adj", "(0, 1] の範囲で指定してください")
        if self.lambda_dyn > self.lambda_adj:
            _fail(f"{pointer}/lambda_dyn", "lambda_dyn は lambda_adj 以下である必要があります")
        if not self.w_max >= 1.0:
            _fail(f"{pointer}/w_max", "1 以上が必要です")


@dataclass
class TrainConfig:
    iterations: int = _opt(3000, "学習イテレーション数")
    learning_rate: float = _opt(1e-2, "Adam の学習率")
    beta1: float = _opt(0.9, "Adam の β1")
    beta2: float = _opt(0.999, "Adam の β2")
    eps: float = _opt(1e-8, "Adam の ε")
    checkpoint_every: int = _opt(500, "チェックポイント間隔（0 で無効）")
    eval_every: int = _opt(500, "評価間隔（0 で無効）")
    density_init: float = _opt(-5.0, "密度パラメータの初期値")
    logit_init: float = _opt(0.0, "意味ロジットの初期値")
    progress: bool = _opt(True, "tqdm の進捗表示")

    def _validate(self, pointer: str) -> None:
        if self.iterations < 0:
            _fail(f"{pointer}/iterations", "0 以上が必要です")
        if not self.learning_rate > 0:
            _fail(f"{pointer}/learning_rate", "正の値が必要です")
        for key in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, key) < 1.0:
                _fail(f"{pointer}/{key}", "[0, 1) の範囲で指定してください")
        if not self.eps > 0:
            _fail(f"{pointer}/eps", "正の値が必要です")
        for key in ("checkpoint_every", "eval_every"):
            if getattr(self, key) < 0:
                _fail(f"{pointer}/{key}", "0 以上が必要です")


@dataclass
class EvalConfig:
    tau: float = _opt(0.2, "占有判定の σ しきい値")
    free_as_empty: bool = _opt(True, "argmax が自由空間クラスのボクセルを空とみなす")

    def _validate(self, pointer: str) -> None:
        if self.tau < 0:
            _fail(f"{pointer}/tau", "非負の値が必要です")


@dataclass
class SceneConfig:
    profile: str = _opt(
        "default",
        "シーンプロファイル: default | ablation | front-view | tiny",
        choices=("default", "ablation", "front-view", "tiny"),
    )
    spec: Optional[Dict[str, Any]] = _opt(None, "インラインのシーン仕様（プロファイルへ上書き）")

    def _validate(self, pointer: str) -> None:
        if self.spec is None:
            return
        # 遅延 import（synthworld → evalio → config の循環参照）
        from common.synthworld import resolve_spec

        # プロファイル名とトップレベルのキーはここで弾く。物体や軌跡の中身は gen_scene が検証する
        resolve_spec(self.spec, pointer=f"{pointer}/spec")


@dataclass
class RunConfig:
    seed: int = _opt(0, "乱数シード")
    workers: Optional[int] = _opt(None, f"ワーカー数（null なら --workers → ${WORKERS_ENV} → 1）")
    scene: SceneConfig = field(default_factory=SceneConfig)
    renderer: RendererConfig = field(default_factory=RendererConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    raypool: RayPoolConfig = field(default_factory=RayPoolConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    jobs: List[Dict[str, Any]] = _opt([], "ablate 用のジョブ定義（type: train_variant）")

    def _validate(self, pointer: str) -> None:
        if self.seed < 0:
            _fail(f"{pointer}/seed", "0 以上が必要です")
        if self.workers is not None and self.workers < 1:
            _fail(f"{pointer}/workers", "1 以上が必要です")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------#
# 検証付き構築
# ---------------------------------------------------------------------------#
def _type_name(hint: Any) -> str:
    origin = get_origin(hint)
    if origin is Union:
        args = [a for a in get_args(hint) if a is not type(None)]
        return f"{_type_name(args[0])} | null"
    if origin in (list, List):
        return f"list[{_type_name(get_args(hint)[0])}]"
    if origin in (dict, Dict):
        return "object"
    if dataclasses.is_dataclass(hint):
        return "object"
    return getattr(hint, "__name__", str(hint))


def _coerce(value: Any, hint: Any, pointer: str) -> Any:
    origin = get_origin(hint)
    if origin is Union:
        if value is None:
            return None
        inner = [a for a in get_args(hint) if a is not type(None)][0]
        return _coerce(value, inner, pointer)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, pointer)
    if origin in (list, List):
        if not isinstance(value, list):
            _fail(pointer, f"配列が必要です: {value!r}")
        (item,) = get_args(hint)
        return [_coerce(v, item, f"{pointer}/{i}") for i, v in enumerate(value)]
    if origin in (dict, Dict):
        if not isinstance(value, Mapping):
            _fail(pointer, f"オブジェクトが必要です: {value!r}")
        return dict(value)
    if hint is bool:
        if not isinstance(value, bool):
            _fail(pointer, f"真偽値が必要です: {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(pointer, f"整数が必要です: {value!r}")
        return int(value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(pointer, f"数値が必要です: {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            _fail(pointer, f"文字列が必要です: {value!r}")
        return value
    return value


def _build(cls: Any, data: Any, pointer: str) -> Any:
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        _fail(pointer or "/", f"オブジェクトが必要です: {data!r}")
    hints = get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            _fail(f"{pointer}/{key}", "未知のキーです")
    kwargs = {}
    for name, value in data.items():
        sub = f"{pointer}/{name}"
        coerced = _coerce(value, hints[name], sub)
        choices = fields[name].metadata.get("choices")
        if choices and coerced not in choices:
            _fail(sub, f"{coerced!r} は選択肢 {list(choices)} にありません")
        kwargs[name] = coerced
    obj = cls(**kwargs)
    obj._validate(pointer)
    return obj


def build_config(data: Optional[Mapping]) -> RunConfig:
    """辞書から RunConfig を構築し、検証する。"""
    return _build(RunConfig, data or {}, "")


def apply_overrides(data: MutableMapping, overrides: Sequence[str]) -> MutableMapping:
    """
    `section.key=value` 形式の上書きを適用する。値は YAML として解釈する。

    存在しないキーもそのまま書き込み、検証時に未知のキーとして弾く。
    """
    for item in overrides or []:
        if "=" not in item:
            _fail("/", f"--set は key=value 形式で指定してください: {item!r}")
        path, raw = item.split("=", 1)
        keys = [k for k in path.strip().split(".") if k]
        if not keys:
            _fail("/", f"--set のキーが空です: {item!r}")
        value = yaml.safe_load(raw) if raw.strip() else None
        node = data
        for i, key in enumerate(keys[:-1]):
            nxt = node.get(key)
            if nxt is None:
                nxt = node[key] = {}
            if not isinstance(nxt, MutableMapping):
                _fail("/" + "/".join(keys[: i + 1]), "オブジェクトではないため上書きできません")
            node = nxt
        node[keys[-1]] = value
        LOG.debug("override %s = %r", path, value)
    return data


def config_schema(cls: Any = RunConfig, pointer: str = "") -> List[Dict[str, Any]]:
    """全キーの (ポインタ, 型, 既定値, 説明) を列挙する。"""
    hints = get_type_hints(cls)
    entries: List[Dict[str, Any]] = []
    for f in dataclasses.fields(cls):
        hint = hints[f.name]
        sub = f"{pointer}/{f.name}"
        if dataclasses.is_dataclass(hint):
            entries.extend(config_schema(hint, sub))
            continue
        if f.default is not dataclasses.MISSING:
            default = f.default
        else:
            default = f.default_factory()  # type: ignore[misc]
        entry = {"key": sub, "type": _type_name(hint), "default": default, "doc": f.metadata.get("doc", "")}
        if "choices" in f.metadata:
            entry["choices"] = list(f.metadata["choices"])
        entries.append(entry)
    return entries


def resolve_workers(
    cli_value: Optional[int], config: RunConfig, *, getenv: Callable[[str], Optional[str]] = os.environ.get
) -> int:
    """--workers → 設定の workers → 環境変数 → 1 の順で決める。"""
    if cli_value is not None:
        workers = cli_value
    elif config.workers is not None:
        workers = config.workers
    else:
        raw = getenv(WORKERS_ENV)
        if raw:
            try:
                workers = int(raw)
            except ValueError as exc:
                raise ConfigError(f"{WORKERS_ENV} が整数ではありません: {raw!r}", pointer="/workers") from exc
        else:
            workers = 1
    if workers < 1:
        raise ConfigError(f"workers は 1 以上が必要です: {workers}", pointer="/workers")
    return workers


class ConfigLoader:
    """設定ファイルの読み込み、上書きの適用、検証を担う。"""

    def load_raw(self, path: Optional[str]) -> dict:
        if not path:
            return {}
        cfg_path = Path(path)
        if not cfg_path.exists():
            raise FileNotFoundError(f"設定ファイルが見つかりません: {path}")
        with cfg_path.open("r", encoding="utf-8") as fh:
            try:
                data = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"設定ファイルを解釈できません: {exc}", pointer="/") from exc
        if not isinstance(data, dict):
            raise ConfigError("設定のトップレベルはオブジェクトである必要があります", pointer="/")
        return data

    def load(self, path: Optional[str], *, overrides: Sequence[str] = ()) -> RunConfig:
        data = self.load_raw(path)
        apply_overrides(data, overrides)
        config = build_config(data)
        LOG.debug("config loaded from %s (%d overrides)", path or "<defaults>", len(overrides))
        return config
