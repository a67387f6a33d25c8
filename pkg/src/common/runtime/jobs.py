"""
ジョブディスパッチャ。
"""

from __future__ import annotations

import logging
from typing import Any, Dict, Iterable, List, Mapping, MutableMapping, Optional

from common.jobs.base import JobFactory

LOG = logging.getLogger(__name__)


class JobDispatcher:
    """ジョブ設定を `JobFactory` 経由で順に実行し、結果をジョブ名ごとに集める。"""

    def __init__(self, factory: JobFactory):
        self._factory = factory

    def dispatch_job(
        self,
        job_cfg: Mapping,
        *,
        context: MutableMapping[str, Any],
        pointer: str = "/jobs",
    ) -> Optional[Dict[str, Any]]:
        job = self._factory.create(job_cfg, pointer=pointer)
        LOG.info("ジョブ開始: %s", job.name)
        result = job.execute(context=context)
        LOG.debug("job %s finished: %s", job.name, result)
        return result

    def dispatch_jobs(
        self,
        jobs: Iterable[Mapping],
        *,
        context: Optional[MutableMapping[str, Any]] = None,
    ) -> List[Optional[Dict[str, Any]]]:
        context = context if context is not None else {}
        return [
            self.dispatch_job(job_cfg, context=context, pointer=f"/jobs/{i}")
            for i, job_cfg in enumerate(jobs or [])
        ]
