#!/usr/bin/env python3
"""Environment setup helper (cross-platform).

This script creates/uses a project-local .venv_occ_runner and installs the
package in editable mode with the dev extra from pyproject.toml. It does NOT
run the application.

Usage:
  python env_setup.py             # create/use .venv_occ_runner and install deps
  python env_setup.py --no-dev    # skip the pytest extra
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
from pathlib import Path


ROOT = Path(__file__).resolve().parent
VENV = ROOT / ".venv_occ_runner"


def ensure_venv(venv_path: Path) -> Path:
    if not venv_path.exists():
        print(f"Creating virtualenv at {venv_path}")
        subprocess.check_call([sys.executable, "-m", "venv", str(venv_path)])
    if os.name == "nt":
        return venv_path / "Scripts" / "python.exe"
    return venv_path / "bin" / "python"


def install_package(python: Path, *, dev: bool) -> None:
    if not (ROOT / "pyproject.toml").exists():
        print("No pyproject.toml found - nothing to install.")
        return
    target = ".[dev]" if dev else "."
    print(f"Installing {target} in editable mode (if needed)...")
    subprocess.check_call([str(python), "-m", "pip", "install", "--upgrade", "pip", "setuptools", "wheel"])
    subprocess.check_call([str(python), "-m", "pip", "install", "-e", target], cwd=str(ROOT))


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Create the occ-runner virtualenv")
    parser.add_argument("--no-dev", action="store_true", help="skip test dependencies")
    args = parser.parse_args(argv)

    python_in_venv = ensure_venv(VENV)
    install_package(python_in_venv, dev=not args.no_dev)
    print("")
    print("Environment ready.")
    print("To run the application, activate the venv and run your command, e.g:")
    if os.name == "nt":
        print(r"  .\.venv_occ_runner\Scripts\activate.bat")
    else:
        print("  source .venv_occ_runner/bin/activate")
    print("  occ-runner gen-scene --profile tiny --out runs/tiny_data")
    print("  occ-runner train --config configs/tiny.json --data runs/tiny_data --out runs/tiny_run")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
