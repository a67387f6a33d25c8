"""
可視化制御ユーティリティ（matplotlib）。

ラベル画像・深度画像の並べ表示と損失曲線。--show / --plot が無ければ何もしない。
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from common.evalio.images import colorize

LOG = logging.getLogger(__name__)


class VisualizationController:
    """表示の可否判定とタイトル組み立て、図の保存を担当する。"""

    def __init__(
        self,
        *,
        default_title: str = "occrender",
        done_message: Optional[str] = None,
        skip_message: Optional[str] = None,
        backend: Optional[str] = None,
    ) -> None:
        self._default_title = default_title
        self._done_message = done_message
        self._skip_message = skip_message
        self._backend = backend

    def _pyplot(self):
        import matplotlib

        if self._backend:
            matplotlib.use(self._backend)
        import matplotlib.pyplot as plt

        return plt

    def _finish(self, plt, fig, *, show: bool, save_path: Optional[Union[str, Path]]) -> None:
        if save_path is not None:
            fig.savefig(save_path, dpi=120, bbox_inches="tight")
            LOG.info("図を保存しました: %s", save_path)
        if show:
            plt.show()
        plt.close(fig)
        if self._done_message:
            LOG.info(self._done_message)

    def show_labels(
        self,
        sem: np.ndarray,
        depth: np.ndarray,
        free_class: int,
        *,
        gt_sem: Optional[np.ndarray] = None,
        title: Optional[str] = None,
        show: bool = False,
        save_path: Optional[Union[str, Path]] = None,
    ) -> bool:
        """意味ラベル（カラー）と深度を並べる。gt_sem があれば 3 枚目に表示。"""
        if not show and save_path is None:
            if self._skip_message:
                LOG.info(self._skip_message)
            return False
        plt = self._pyplot()
        panels = 3 if gt_sem is not None else 2
        fig, axes = plt.subplots(1, panels, figsize=(4 * panels, 3))
        axes[0].imshow(colorize(sem, free_class))
        axes[0].set_title("semantic")
        img = axes[1].imshow(np.where(np.isfinite(depth), depth, np.nan), cmap="viridis")
        axes[1].set_title("depth [m]")
        fig.colorbar(img, ax=axes[1], fraction=0.046)
        if gt_sem is not None:
            axes[2].imshow(colorize(gt_sem, free_class))
            axes[2].set_title("ground truth")
        for ax in axes:
            ax.set_axis_off()
        fig.suptitle(title or self._default_title)
        self._finish(plt, fig, show=show, save_path=save_path)
        return True

    def plot_losses(
        self,
        loss_curve: Sequence[float],
        *,
        window: int = 100,
        title: Optional[str] = None,
        show: bool = False,
        save_path: Optional[Union[str, Path]] = None,
    ) -> bool:
        """損失曲線と移動平均。"""
        if not len(loss_curve) or (not show and save_path is None):
            if self._skip_message:
                LOG.info(self._skip_message)
            return False
        plt = self._pyplot()
        y = np.asarray(loss_curve, dtype=np.float64)
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(np.arange(1, len(y) + 1), y, lw=0.8, alpha=0.5, label="total")
        if len(y) >= window:
            avg = np.convolve(y, np.ones(window) / window, mode="valid")
            ax.plot(np.arange(window, len(y) + 1), avg, lw=2.0, label=f"moving avg ({window})")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_yscale("log" if np.all(y > 0) else "linear")
        ax.grid(True, linestyle="--", alpha=0.3)
        ax.legend()
        ax.set_title(title or self._default_title)
        self._finish(plt, fig, show=show, save_path=save_path)
        return True
