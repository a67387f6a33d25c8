"""評価指標とファイル入出力 (SDF1 / OCC1 / MOM1 / PGM / PPM)。"""
from .formats import (
    MOM_MAGIC,
    OCC_MAGIC,
    SDF_MAGIC,
    Moments,
    decode_mom,
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
from .images import colorize, depth_to_mm, mm_to_depth, read_pgm, read_ppm, write_pgm, write_ppm
from .metrics import EvalReport, evaluate, render_eval, voxel_miou

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
    "colorize",
    "depth_to_mm",
    "mm_to_depth",
    "read_pgm",
    "read_ppm",
    "write_pgm",
    "write_ppm",
    "EvalReport",
    "evaluate",
    "render_eval",
    "voxel_miou",
]
