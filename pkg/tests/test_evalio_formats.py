import struct

import numpy as np
import pytest

from common.errors import DimensionOverflowError, FormatError, MagicMismatchError, TruncatedFileError
from common.evalio.formats import (
    Moments,
    decode_occ,
    decode_sdf,
    encode_mom,
    encode_occ,
    encode_sdf,
    peek_occ_max_label,
    read_checkpoint,
    read_occ,
    read_sdf,
    sniff,
    write_checkpoint,
    write_occ,
    write_sdf,
)
from common.sdf import OccupancyGrid, init_field


@pytest.fixture
def field(rng):
    f = init_field((2, 3, 4), 3, (-1.0, 0.5, 2.0), 0.25)
    f.density_params = rng.normal(size=f.dims).astype(np.float32).astype(np.float64)
    f.semantic_params = rng.normal(size=f.dims + (3,)).astype(np.float32).astype(np.float64)
    return f


def test_sdf_layout_and_round_trip(field, tmp_path):
    buf = encode_sdf(field)
    assert len(buf) == 52 + 4 * 24 + 4 * 24 * 3
    assert buf[:4] == b"SDF1"
    assert struct.unpack_from("<IIII", buf, 4) == (2, 3, 4, 3)
    assert struct.unpack_from("<dddd", buf, 20) == (-1.0, 0.5, 2.0, 0.25)
    # z が最速
    assert np.frombuffer(buf, "<f4", 2, 52).tolist() == field.density_params[0, 0, :2].tolist()

    path = tmp_path / "f.sdf"
    write_sdf(path, field)
    loaded = read_sdf(path)
    assert loaded.dims == field.dims and loaded.num_classes == 3
    assert np.array_equal(loaded.density_params, field.density_params)
    assert np.array_equal(loaded.semantic_params, field.semantic_params)
    assert np.array_equal(loaded.origin, field.origin)
    assert sniff(path) == b"SDF1"


def test_sdf_errors(field):
    buf = encode_sdf(field)
    with pytest.raises(TruncatedFileError):
        decode_sdf(buf[:-1])
    with pytest.raises(TruncatedFileError):
        decode_sdf(buf[:30])
    with pytest.raises(MagicMismatchError):
        decode_sdf(b"SDF2" + buf[4:])
    huge = bytearray(buf)
    struct.pack_into("<I", huge, 4, 100000)
    with pytest.raises(DimensionOverflowError):
        decode_sdf(bytes(huge))
    assert issubclass(MagicMismatchError, FormatError)


def test_occ_layout_and_round_trip(tmp_path, rng):
    labels = rng.integers(0, 4, (3, 2, 2))
    grid = OccupancyGrid((3, 2, 2), labels, 3)
    buf = encode_occ(grid)
    assert len(buf) == 16 + 12
    assert buf[:4] == b"OCC1"
    assert peek_occ_max_label(buf) == int(labels.max())
    path = tmp_path / "g.occ"
    write_occ(path, grid)
    assert read_occ(path, 3) == grid
    with pytest.raises(TruncatedFileError):
        decode_occ(buf[:-2], 3)
    with pytest.raises(MagicMismatchError):
        decode_occ(b"OCC0" + buf[4:], 3)
    with pytest.raises(FileNotFoundError):
        read_occ(tmp_path / "missing.occ", 3)


def test_checkpoint_round_trip(field, tmp_path, rng):
    moments = Moments.zeros(field, seed=9)
    moments.m_density = rng.normal(size=field.dims).astype(np.float32).astype(np.float64)
    moments.v_semantic = rng.uniform(size=field.dims + (3,)).astype(np.float32).astype(np.float64)
    moments.iteration = 42
    path = tmp_path / "ckpt.sdf"
    write_checkpoint(path, field, moments)
    assert path.stat().st_size == len(encode_sdf(field)) + len(encode_mom(moments))
    loaded, mom = read_checkpoint(path)
    assert np.array_equal(loaded.density_params, field.density_params)
    assert np.array_equal(mom.m_density, moments.m_density)
    assert np.array_equal(mom.v_semantic, moments.v_semantic)
    assert (mom.iteration, mom.seed) == (42, 9)


def test_checkpoint_requires_moments_section(field, tmp_path):
    path = tmp_path / "plain.sdf"
    write_sdf(path, field)
    with pytest.raises(TruncatedFileError):
        read_checkpoint(path)
