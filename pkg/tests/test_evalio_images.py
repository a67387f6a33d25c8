import numpy as np
import pytest

from common.errors import DimensionOverflowError, InputError, MagicMismatchError, TruncatedFileError
from common.evalio.images import (
    FREE_COLOR,
    PALETTE,
    colorize,
    depth_to_mm,
    mm_to_depth,
    read_pgm,
    read_ppm,
    write_pgm,
    write_ppm,
)


def test_pgm_8bit_round_trip(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    path = tmp_path / "a.pgm"
    write_pgm(path, img)
    assert path.read_bytes().startswith(b"P5\n4 3\n255\n")
    out = read_pgm(path)
    assert out.dtype == np.uint8
    assert np.array_equal(out, img)


def test_pgm_16bit_is_big_endian(tmp_path):
    img = np.array([[1, 258], [65535, 0]], dtype=np.uint16)
    path = tmp_path / "d.pgm"
    write_pgm(path, img, maxval=65535)
    data = path.read_bytes()
    assert data.endswith(b"\x00\x01\x01\x02\xff\xff\x00\x00")
    assert np.array_equal(read_pgm(path), img)


def test_pgm_header_comments_are_skipped(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n# max\n255\n\x07\x09")
    assert read_pgm(path).tolist() == [[7, 9]]


def test_pgm_errors(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P5\n4 4\n255\n\x00\x01")
    with pytest.raises(TruncatedFileError):
        read_pgm(path)
    path.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(MagicMismatchError):
        read_pgm(path)
    path.write_bytes(b"P5\n99999 1\n255\n")
    with pytest.raises(DimensionOverflowError):
        read_pgm(path)
    with pytest.raises(FileNotFoundError):
        read_pgm(tmp_path / "none.pgm")
    with pytest.raises(InputError):
        write_pgm(path, np.array([[300]]), maxval=255)


def test_ppm_round_trip(tmp_path):
    rgb = np.arange(18, dtype=np.uint8).reshape(2, 3, 3)
    path = tmp_path / "c.ppm"
    write_ppm(path, rgb)
    assert np.array_equal(read_ppm(path), rgb)
    with pytest.raises(InputError):
        write_ppm(path, np.zeros((2, 2)))


def test_colorize_marks_free_space():
    rgb = colorize(np.array([[0, 1, 4]]), free_class=4)
    assert np.array_equal(rgb[0, 0], PALETTE[0])
    assert np.array_equal(rgb[0, 1], PALETTE[1])
    assert np.array_equal(rgb[0, 2], FREE_COLOR)


def test_depth_mm_conversion():
    mm = depth_to_mm(np.array([np.nan, 0.0004, 1.5, 70.0]))
    assert mm.dtype == np.uint16
    assert mm.tolist() == [0, 1, 1500, 65535]
    back = mm_to_depth(mm)
    assert np.isnan(back[0])
    assert back[2] == pytest.approx(1.5)
