import numpy as np
import pytest

from common.errors import InputError
from common.runtime.workers import BlockExecutor, block_rng, block_slices


def test_block_slices_cover_range():
    slices = block_slices(10, 4)
    assert [(s.start, s.stop) for s in slices] == [(0, 4), (4, 8), (8, 10)]
    assert block_slices(0, 4) == []
    with pytest.raises(InputError):
        block_slices(3, 0)


def test_block_rng_streams_are_independent_of_call_order():
    a = block_rng(1, 2, 3).random(3)
    block_rng(1, 2, 4).random(10)
    assert np.array_equal(a, block_rng(1, 2, 3).random(3))
    assert not np.array_equal(a, block_rng(1, 2, 4).random(3))


def test_map_returns_results_in_block_order():
    def work(i, s):
        return i, s.stop - s.start

    with BlockExecutor(workers=4, block_size=3) as ex:
        out = ex.map(work, 20)
    assert out == [(0, 3), (1, 3), (2, 3), (3, 3), (4, 3), (5, 3), (6, 2)]
    assert ex._pool is None


def test_map_items_keeps_input_order():
    with BlockExecutor(workers=3) as ex:
        assert ex.map_items(lambda a, b: a * b, [(1, 2), (3, 4), (5, 6)]) == [2, 12, 30]
    with pytest.raises(InputError):
        BlockExecutor(workers=0)
