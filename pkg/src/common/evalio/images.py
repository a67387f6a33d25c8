"""
ラベル画像の入出力（Netpbm バイナリ形式）。

* 意味ラベル: 8bit PGM (P5)、画素値 = クラス ID
* 深度: 16bit PGM (P5、ビッグエンディアン)、単位 mm、0 = 無効
* 確認用カラー: PPM (P6)、固定パレット
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from common.errors import DimensionOverflowError, FormatError, InputError, MagicMismatchError, TruncatedFileError

__all__ = [
    "PALETTE",
    "write_pgm",
    "read_pgm",
    "write_ppm",
    "read_ppm",
    "colorize",
    "depth_to_mm",
    "mm_to_depth",
]

LOG = logging.getLogger(__name__)

MAX_SIDE = 1 << 15
DEPTH_MAX_MM = 65535

PALETTE = np.array(
    [
        [128, 64, 128],
        [70, 70, 70],
        [0, 0, 142],
        [107, 142, 35],
        [250, 170, 30],
        [220, 20, 60],
        [190, 153, 153],
        [152, 251, 152],
        [255, 255, 0],
        [0, 80, 100],
        [119, 11, 32],
        [244, 35, 232],
    ],
    dtype=np.uint8,
)
FREE_COLOR = np.array([70, 130, 180], dtype=np.uint8)

PathLike = Union[str, Path]


def _header(magic: bytes, width: int, height: int, maxval: int) -> bytes:
    return magic + b"\n" + f"{width} {height}\n{maxval}\n".encode("ascii")


def _parse_header(buf: bytes, magic: bytes) -> Tuple[int, int, int, int]:
    """(width, height, maxval, データ開始位置) を返す。コメント行 (#) は読み飛ばす。"""
    if len(buf) < 2:
        raise TruncatedFileError(2, len(buf), what="magic")
    if buf[:2] != magic:
        raise MagicMismatchError(magic, bytes(buf[:2]))
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            if pos >= len(buf):
                raise TruncatedFileError(pos + 1, len(buf), what="header")
            raise FormatError(f"ヘッダを解釈できません (offset {pos})")
        tokens.append(int(buf[start:pos]))
    # ヘッダ末尾は空白 1 文字
    if pos >= len(buf):
        raise TruncatedFileError(pos + 1, len(buf), what="header")
    pos += 1
    width, height, maxval = tokens
    if width < 1 or height < 1 or width > MAX_SIDE or height > MAX_SIDE:
        raise DimensionOverflowError((width, height), MAX_SIDE)
    if not 0 < maxval <= 65535:
        raise FormatError(f"maxval が範囲外です: {maxval}")
    return width, height, maxval, pos


def write_pgm(path: PathLike, image: np.ndarray, maxval: int = 255) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise InputError(f"PGM は 2 次元配列が必要です: shape={img.shape}")
    if img.size and (img.min() < 0 or img.max() > maxval):
        raise InputError(f"画素値が [0, {maxval}] を超えています")
    height, width = img.shape
    dtype = ">u1" if maxval < 256 else ">u2"
    Path(path).write_bytes(_header(b"P5", width, height, maxval) + img.astype(dtype).tobytes(order="C"))


def read_pgm(path: PathLike) -> np.ndarray:
    """(height, width) の配列を返す。maxval < 256 なら uint8、それ以外は uint16。"""
    buf = Path(path).read_bytes() if Path(path).exists() else _missing(path)
    width, height, maxval, pos = _parse_header(buf, b"P5")
    size = 1 if maxval < 256 else 2
    end = pos + width * height * size
    if len(buf) < end:
        raise TruncatedFileError(end, len(buf), what="PGM pixels")
    dtype = ">u1" if size == 1 else ">u2"
    data = np.frombuffer(buf, dtype=dtype, count=width * height, offset=pos)
    return data.astype(np.uint8 if size == 1 else np.uint16).reshape(height, width)


def write_ppm(path: PathLike, rgb: np.ndarray) -> None:
    img = np.asarray(rgb, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError(f"PPM は (H, W, 3) 配列が必要です: shape={img.shape}")
    height, width, _ = img.shape
    Path(path).write_bytes(_header(b"P6", width, height, 255) + img.tobytes(order="C"))


def read_ppm(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes() if Path(path).exists() else _missing(path)
    width, height, maxval, pos = _parse_header(buf, b"P6")
    if maxval > 255:
        raise FormatError("16bit PPM には対応していません")
    end = pos + width * height * 3
    if len(buf) < end:
        raise TruncatedFileError(end, len(buf), what="PPM pixels")
    return np.frombuffer(buf, dtype=np.uint8, count=width * height * 3, offset=pos).reshape(height, width, 3)


def colorize(sem: np.ndarray, free_class: int) -> np.ndarray:
    """クラス ID 画像を固定パレットで RGB にする。自由空間は空色。"""
    sem = np.asarray(sem, dtype=np.int64)
    rgb = PALETTE[np.mod(sem, len(PALETTE))]
    rgb[sem == free_class] = FREE_COLOR
    return rgb


def depth_to_mm(depth: np.ndarray) -> np.ndarray:
    """メートル → mm (uint16)。NaN は 0（無効）、範囲外は最大値に丸める。"""
    d = np.asarray(depth, dtype=np.float64)
    mm = np.where(np.isfinite(d), np.rint(d * 1000.0), 0.0)
    if np.any(mm > DEPTH_MAX_MM):
        LOG.warning("深度が %d mm を超える画素を丸めました", DEPTH_MAX_MM)
    # 有効な深度が 0 mm に丸められて無効扱いにならないようにする
    mm = np.where(np.isfinite(d) & (mm < 1), 1.0, mm)
    return np.clip(mm, 0, DEPTH_MAX_MM).astype(np.uint16)


def mm_to_depth(mm: np.ndarray) -> np.ndarray:
    m = np.asarray(mm, dtype=np.float64)
    return np.where(m > 0, m / 1000.0, np.nan)


def _missing(path: PathLike) -> bytes:
    raise FileNotFoundError(f"ファイルが見つかりません: {path}")
