"""
バイナリ形式: SDF1（フィールド）、OCC1（占有グリッド）、MOM1（Adam モーメント）。

いずれもリトルエンディアン。配列は x → y → z の順（z が最速）、意味パラメータは
クラス番号が最速。読み込みはヘッダを厳密に検証し、形式ごとの例外を送出する。
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from common.errors import DimensionOverflowError, FormatError, MagicMismatchError, TruncatedFileError
from common.sdf import OccupancyGrid, SemanticDensityField

__all__ = [
    "SDF_MAGIC",
    "OCC_MAGIC",
    "MOM_MAGIC",
    "Moments",
    "encode_sdf",
    "decode_sdf",
    "encode_occ",
    "decode_occ",
    "encode_mom",
    "decode_mom",
    "write_sdf",
    "read_sdf",
    "write_occ",
    "read_occ",
    "peek_occ_max_label",
    "write_checkpoint",
    "read_checkpoint",
    "sniff",
]

LOG = logging.getLogger(__name__)

SDF_MAGIC = b"SDF1"
OCC_MAGIC = b"OCC1"
MOM_MAGIC = b"MOM1"

MAX_DIM = 4096
MAX_CLASSES = 254

_SDF_HEADER = struct.Struct("<4sIIIIdddd")
_OCC_HEADER = struct.Struct("<4sIII")
_MOM_HEADER = struct.Struct("<4sIIII")
_MOM_TRAILER = struct.Struct("<QQ")

PathLike = Union[str, Path]


def _check_magic(buf: bytes, offset: int, magic: bytes) -> None:
    actual = bytes(buf[offset : offset + len(magic)])
    if len(actual) < len(magic):
        raise TruncatedFileError(offset + len(magic), len(buf), what="magic")
    if actual != magic:
        raise MagicMismatchError(magic, actual)


def _need(buf: bytes, end: int, what: str) -> None:
    if len(buf) < end:
        raise TruncatedFileError(end, len(buf), what=what)


def _check_dims(dims: Tuple[int, ...], classes: int = 1) -> None:
    if any(d < 1 or d > MAX_DIM for d in dims) or classes < 1 or classes > MAX_CLASSES:
        raise DimensionOverflowError(tuple(dims) + (classes,), MAX_DIM)


def _f32(buf: bytes, offset: int, count: int, what: str) -> Tuple[np.ndarray, int]:
    end = offset + 4 * count
    _need(buf, end, what)
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).astype(np.float64)
    return arr, end


# ---------------------------------------------------------------------------#
# SDF1
# ---------------------------------------------------------------------------#
def encode_sdf(field: SemanticDensityField) -> bytes:
    h, w, d = field.dims
    header = _SDF_HEADER.pack(SDF_MAGIC, h, w, d, field.num_classes, *field.origin.tolist(), field.voxel_size)
    return (
        header
        + field.density_params.astype("<f4").tobytes(order="C")
        + field.semantic_params.astype("<f4").tobytes(order="C")
    )


def decode_sdf(buf: bytes, offset: int = 0) -> Tuple[SemanticDensityField, int]:
    """buf[offset:] から SDF1 を読み、(field, 読み終えた位置) を返す。"""
    _check_magic(buf, offset, SDF_MAGIC)
    _need(buf, offset + _SDF_HEADER.size, "SDF1 header")
    _, h, w, d, num_classes, ox, oy, oz, voxel_size = _SDF_HEADER.unpack_from(buf, offset)
    _check_dims((h, w, d), num_classes)
    pos = offset + _SDF_HEADER.size
    n = h * w * d
    density, pos = _f32(buf, pos, n, "SDF1 density")
    semantic, pos = _f32(buf, pos, n * num_classes, "SDF1 semantic")
    field = SemanticDensityField(
        dims=(h, w, d),
        num_classes=num_classes,
        origin=np.array([ox, oy, oz]),
        voxel_size=voxel_size,
        density_params=density.reshape(h, w, d),
        semantic_params=semantic.reshape(h, w, d, num_classes),
    )
    return field, pos


def write_sdf(path: PathLike, field: SemanticDensityField) -> None:
    Path(path).write_bytes(encode_sdf(field))
    LOG.debug("wrote SDF1 %s dims=%s L=%d", path, field.dims, field.num_classes)


def read_sdf(path: PathLike) -> SemanticDensityField:
    field, _ = decode_sdf(_read(path))
    return field


# ---------------------------------------------------------------------------#
# OCC1
# ---------------------------------------------------------------------------#
def encode_occ(grid: OccupancyGrid) -> bytes:
    h, w, d = grid.dims
    if grid.num_classes > MAX_CLASSES:
        raise DimensionOverflowError(grid.dims + (grid.num_classes,), MAX_CLASSES)
    return _OCC_HEADER.pack(OCC_MAGIC, h, w, d) + grid.labels.astype(np.uint8).tobytes(order="C")


def decode_occ(buf: bytes, num_classes: int, offset: int = 0) -> Tuple[OccupancyGrid, int]:
    """
    OCC1 は L を持たないので呼び出し側が num_classes を与える。

    ラベル値 num_classes が空ボクセル。
    """
    _check_magic(buf, offset, OCC_MAGIC)
    _need(buf, offset + _OCC_HEADER.size, "OCC1 header")
    _, h, w, d = _OCC_HEADER.unpack_from(buf, offset)
    _check_dims((h, w, d))
    pos = offset + _OCC_HEADER.size
    end = pos + h * w * d
    _need(buf, end, "OCC1 labels")
    labels = np.frombuffer(buf, dtype=np.uint8, count=h * w * d, offset=pos).reshape(h, w, d)
    return OccupancyGrid((h, w, d), labels.astype(np.int64), num_classes), end


def peek_occ_max_label(buf: bytes) -> int:
    """ヘッダを検証し、ラベルの最大値を返す（num_classes 推定用）。"""
    _check_magic(buf, 0, OCC_MAGIC)
    _need(buf, _OCC_HEADER.size, "OCC1 header")
    _, h, w, d = _OCC_HEADER.unpack_from(buf, 0)
    _check_dims((h, w, d))
    _need(buf, _OCC_HEADER.size + h * w * d, "OCC1 labels")
    labels = np.frombuffer(buf, dtype=np.uint8, count=h * w * d, offset=_OCC_HEADER.size)
    return int(labels.max())


def write_occ(path: PathLike, grid: OccupancyGrid) -> None:
    Path(path).write_bytes(encode_occ(grid))


def read_occ(path: PathLike, num_classes: int) -> OccupancyGrid:
    grid, _ = decode_occ(_read(path), num_classes)
    return grid


# ---------------------------------------------------------------------------#
# MOM1 とチェックポイント
# ---------------------------------------------------------------------------#
@dataclass
class Moments:
    """Adam の一次・二次モーメント（フィールドと同形）と進行状況。"""

    m_density: np.ndarray
    m_semantic: np.ndarray
    v_density: np.ndarray
    v_semantic: np.ndarray
    iteration: int = 0
    seed: int = 0

    @classmethod
    def zeros(cls, field: SemanticDensityField, *, seed: int = 0) -> "Moments":
        sem = field.dims + (field.num_classes,)
        return cls(np.zeros(field.dims), np.zeros(sem), np.zeros(field.dims), np.zeros(sem), 0, seed)

    def copy(self) -> "Moments":
        return Moments(
            self.m_density.copy(),
            self.m_semantic.copy(),
            self.v_density.copy(),
            self.v_semantic.copy(),
            self.iteration,
            self.seed,
        )


def encode_mom(moments: Moments) -> bytes:
    h, w, d, num_classes = moments.m_semantic.shape
    parts = [_MOM_HEADER.pack(MOM_MAGIC, h, w, d, num_classes)]
    for arr in (moments.m_density, moments.m_semantic, moments.v_density, moments.v_semantic):
        parts.append(np.asarray(arr).astype("<f4").tobytes(order="C"))
    parts.append(_MOM_TRAILER.pack(int(moments.iteration), int(moments.seed)))
    return b"".join(parts)


def decode_mom(buf: bytes, offset: int = 0) -> Tuple[Moments, int]:
    _check_magic(buf, offset, MOM_MAGIC)
    _need(buf, offset + _MOM_HEADER.size, "MOM1 header")
    _, h, w, d, num_classes = _MOM_HEADER.unpack_from(buf, offset)
    _check_dims((h, w, d), num_classes)
    pos = offset + _MOM_HEADER.size
    n = h * w * d
    m_den, pos = _f32(buf, pos, n, "MOM1 m_density")
    m_sem, pos = _f32(buf, pos, n * num_classes, "MOM1 m_semantic")
    v_den, pos = _f32(buf, pos, n, "MOM1 v_density")
    v_sem, pos = _f32(buf, pos, n * num_classes, "MOM1 v_semantic")
    _need(buf, pos + _MOM_TRAILER.size, "MOM1 trailer")
    iteration, seed = _MOM_TRAILER.unpack_from(buf, pos)
    sem = (h, w, d, num_classes)
    moments = Moments(
        m_den.reshape(h, w, d), m_sem.reshape(sem), v_den.reshape(h, w, d), v_sem.reshape(sem), iteration, seed
    )
    return moments, pos + _MOM_TRAILER.size


def write_checkpoint(path: PathLike, field: SemanticDensityField, moments: Moments) -> None:
    """SDF1 セクションの直後に MOM1 セクションを続けた単一ファイル。"""
    Path(path).write_bytes(encode_sdf(field) + encode_mom(moments))
    LOG.info("checkpoint 保存: %s (iteration=%d)", path, moments.iteration)


def read_checkpoint(path: PathLike) -> Tuple[SemanticDensityField, Moments]:
    buf = _read(path)
    field, pos = decode_sdf(buf)
    moments, _ = decode_mom(buf, pos)
    if moments.m_density.shape != field.dims or moments.m_semantic.shape[-1] != field.num_classes:
        raise FormatError(f"MOM1 の形状がフィールドと一致しません: {moments.m_semantic.shape}")
    return field, moments


def _read(path: PathLike) -> bytes:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"ファイルが見つかりません: {path}")
    return p.read_bytes()


def sniff(path: PathLike) -> bytes:
    """先頭 4 バイト（マジック）を返す。"""
    with Path(path).open("rb") as fh:
        return fh.read(4)
