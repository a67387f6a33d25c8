"""
ジョブ実行の共通インターフェースとファクトリ。

ablate コマンドは設定の `jobs:` を JobFactory で Job に変換し、共有の context を
渡しながら順に実行する。
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from typing import Any, Dict, List, Mapping, MutableMapping, Optional, Protocol

from common.errors import ConfigError

LOG = logging.getLogger(__name__)


class Job(ABC):
    """ジョブ設定を保持し、実行手順を定義する基底クラス。"""

    def __init__(self, config: Mapping):
        self.config = config

    @property
    def name(self) -> str:
        return str(self.config.get("name") or self.config.get("type"))

    @abstractmethod
    def execute(self, *, context: MutableMapping[str, Any]) -> Optional[Dict[str, Any]]:
        """ジョブを実行し、結果を返す（context に書き込んでもよい）。"""


class JobCreator(Protocol):
    def __call__(self, config: Mapping) -> Job: ...


class JobFactory:
    """ジョブタイプに応じて `Job` インスタンスを生成する。"""

    def __init__(self) -> None:
        self._registry: Dict[str, JobCreator] = {}

    def register(self, job_type: str, creator: JobCreator) -> None:
        self._registry[job_type] = creator

    @property
    def job_types(self) -> List[str]:
        return sorted(self._registry)

    def create(self, job_config: Mapping, *, pointer: str = "/jobs") -> Job:
        job_type = job_config.get("type")
        if not job_type:
            raise ConfigError("ジョブタイプが指定されていません", pointer=f"{pointer}/type")
        creator = self._registry.get(job_type)
        if creator is None:
            raise ConfigError(
                f"未対応ジョブタイプ: {job_type}（対応: {', '.join(self.job_types)}）", pointer=f"{pointer}/type"
            )
        return creator(job_config)
