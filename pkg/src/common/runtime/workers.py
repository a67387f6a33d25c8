"""
ブロック単位の並列実行と決定的な乱数ストリーム。

レイ列はワーカー数に依存しない固定長ブロックへ分割し、結果は常にブロック順で返す。
乱数は (seed, iteration, block) から派生させるので、ワーカー数やスケジューリングが
変わっても出力はビット単位で一致する。
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

import numpy as np

from common.errors import InputError

__all__ = ["BlockExecutor", "block_rng", "block_slices"]

LOG = logging.getLogger(__name__)

T = TypeVar("T")


def block_slices(n: int, block_size: int) -> List[slice]:
    if block_size < 1:
        raise InputError(f"block_size は 1 以上が必要です: {block_size}")
    return [slice(start, min(start + block_size, n)) for start in range(0, n, block_size)]


def block_rng(seed: int, iteration: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(iteration), int(block)])))


class BlockExecutor:
    """固定長ブロックを ThreadPoolExecutor に流し、ブロック順に結果を集める。"""

    def __init__(self, workers: int = 1, block_size: int = 256) -> None:
        if workers < 1:
            raise InputError(f"workers は 1 以上が必要です: {workers}")
        self.workers = int(workers)
        self.block_size = int(block_size)
        self._pool: Optional[ThreadPoolExecutor] = None
        self._lock = threading.Lock()

    def map(self, fn: Callable[[int, slice], T], n: int) -> List[T]:
        """fn(block_index, slice) を全ブロックに適用し、ブロック順のリストを返す。"""
        slices = block_slices(n, self.block_size)
        if self.workers == 1 or len(slices) <= 1:
            return [fn(i, s) for i, s in enumerate(slices)]
        pool = self._executor()
        futures = [pool.submit(fn, i, s) for i, s in enumerate(slices)]
        return [f.result() for f in futures]

    def map_items(self, fn: Callable[..., T], items: Sequence) -> List[T]:
        """fn(*item) を items の順に適用する。並列時も結果は入力順。"""
        if self.workers == 1 or len(items) <= 1:
            return [fn(*item) for item in items]
        pool = self._executor()
        futures = [pool.submit(fn, *item) for item in items]
        return [f.result() for f in futures]

    def _executor(self) -> ThreadPoolExecutor:
        with self._lock:
            if self._pool is None:
                LOG.debug("BlockExecutor: starting %d worker threads", self.workers)
                self._pool = ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="occ-block")
            return self._pool

    def close(self) -> None:
        with self._lock:
            if self._pool is not None:
                self._pool.shutdown(wait=True)
                self._pool = None

    def __enter__(self) -> "BlockExecutor":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()

    def __repr__(self) -> str:  # pragma: no cover - デバッグ用途
        return f"BlockExecutor(workers={self.workers}, block_size={self.block_size})"