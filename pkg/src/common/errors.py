"""
例外階層と終了コード。

ライブラリ側はここで定義した例外を送出し、CLI (`occ_runner.main`) だけが
`SystemExit(exit_code)` へ変換する。
"""

from __future__ import annotations

from typing import Optional, Sequence

__all__ = [
    "OccRenderError",
    "InputError",
    "ConfigError",
    "NumericalError",
    "FormatError",
    "MagicMismatchError",
    "TruncatedFileError",
    "DimensionOverflowError",
    "EXIT_OK",
    "EXIT_INPUT",
    "EXIT_NUMERICAL",
    "EXIT_FORMAT",
]

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_FORMAT = 4


class OccRenderError(Exception):
    """本パッケージが送出する例外の基底クラス。"""

    exit_code = 1


class InputError(OccRenderError, ValueError):
    """呼び出し側の入力が契約を満たしていない。"""

    exit_code = EXIT_INPUT


class ConfigError(InputError):
    """設定値の誤り。`pointer` は問題のキーを指す JSON Pointer。"""

    def __init__(self, message: str, *, pointer: str = "") -> None:
        self.pointer = pointer
        super().__init__(f"{pointer or '/'}: {message}")


class NumericalError(OccRenderError, ArithmeticError):
    """損失やパラメータが有限でなくなった。"""

    exit_code = EXIT_NUMERICAL

    def __init__(
        self,
        message: str,
        *,
        iteration: Optional[int] = None,
        ray_indices: Sequence[int] = (),
    ) -> None:
        self.iteration = iteration
        self.ray_indices = list(ray_indices)
        detail = message
        if iteration is not None:
            detail += f" (iteration={iteration})"
        if self.ray_indices:
            head = ", ".join(str(i) for i in self.ray_indices[:16])
            detail += f" rays=[{head}{', ...' if len(self.ray_indices) > 16 else ''}]"
        super().__init__(detail)


class FormatError(OccRenderError, ValueError):
    """ファイル形式の誤り。"""

    exit_code = EXIT_FORMAT


class MagicMismatchError(FormatError):
    def __init__(self, expected: bytes, actual: bytes) -> None:
        self.expected = expected
        self.actual = actual
        super().__init__(f"マジックバイトが一致しません: expected={expected!r} actual={actual!r}")


class TruncatedFileError(FormatError):
    def __init__(self, expected: int, actual: int, *, what: str = "payload") -> None:
        self.expected = expected
        self.actual = actual
        super().__init__(f"ファイルが途中で切れています ({what}): expected {expected} bytes, got {actual}")


class DimensionOverflowError(FormatError):
    def __init__(self, dims: Sequence[int], limit: int) -> None:
        self.dims = tuple(dims)
        self.limit = limit
        super().__init__(f"ヘッダの次元が上限を超えています: dims={self.dims} limit={limit}")
