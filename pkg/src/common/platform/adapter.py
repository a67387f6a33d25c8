"""
プラットフォーム依存の処理をまとめたアダプター。
"""

from __future__ import annotations

import os
import platform
from pathlib import Path
from typing import Any, Mapping, Optional


class EnvironmentAdapter:
    """
    CLI からテストまで同じ API で環境依存処理を扱うためのアダプター。

    環境変数とカレントディレクトリを差し替えられるようにしておくと、
    テストで OCCRENDER_WORKERS や相対パス解決をモックしやすい。
    """

    def __init__(self, *, environ: Optional[Mapping[str, str]] = None, cwd: Optional[Path] = None):
        self._environ = environ if environ is not None else os.environ
        self._cwd = cwd

    def get_platform_info(self) -> dict:
        system = platform.system().lower()
        return {
            "system": system,
            "is_windows": system == "windows",
            "is_macos": system == "darwin",
            "is_linux": system == "linux",
            "version": platform.version(),
            "machine": platform.machine(),
            "python": platform.python_version(),
            "cpu_count": os.cpu_count() or 1,
        }

    def getenv(self, key: str, default: Optional[str] = None) -> Optional[str]:
        return self._environ.get(key, default)

    def cwd(self) -> Path:
        return self._cwd or Path.cwd()

    def normalize_path(self, path_str: str) -> str:
        path = Path(path_str).expanduser()
        if not path.is_absolute():
            path = self.cwd() / path
        return str(path.resolve())

    def resolve_resource_path(self, file_entry: str, context: Mapping[str, Any]) -> Path:
        """
        設定ファイル内の相対パスを解決する。

        設定ファイルのディレクトリ、その親、プロジェクトルートの順に探し、
        見つからなければ設定ファイルのディレクトリ基準のパスを返す。
        """
        path = Path(file_entry).expanduser()
        if path.is_absolute():
            return path
        config_dir = Path(str(context.get("config_dir", self.cwd())))
        project_root = Path(str(context.get("project_root", config_dir)))
        candidates = []
        for base in (config_dir, config_dir.parent, project_root):
            if base and base not in candidates:
                candidates.append(base)
        for base in candidates:
            candidate = (base / file_entry).resolve()
            if candidate.exists():
                return candidate
        return (config_dir / file_entry).resolve()


__all__ = ["EnvironmentAdapter"]
