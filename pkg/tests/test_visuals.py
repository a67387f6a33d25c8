import logging

import numpy as np

from common.runtime import VisualizationController


def test_nothing_is_drawn_without_show_or_save(caplog):
    viz = VisualizationController(skip_message="skip", backend="Agg")
    with caplog.at_level(logging.INFO, logger="common.runtime.visuals"):
        assert not viz.plot_losses([1.0, 0.5])
        assert not viz.show_labels(np.zeros((2, 2), dtype=int), np.ones((2, 2)), 4)
    assert caplog.text.count("skip") == 2


def test_loss_plot_is_saved(tmp_path):
    path = tmp_path / "loss.png"
    viz = VisualizationController(default_title="loss", backend="Agg")
    assert viz.plot_losses(np.linspace(2.0, 0.1, 150), window=20, save_path=path)
    assert path.stat().st_size > 0
    assert not viz.plot_losses([], save_path=path)


def test_label_figure_is_saved(tmp_path):
    sem = np.array([[0, 1], [4, 2]])
    depth = np.array([[1.0, 2.0], [np.nan, 3.0]])
    path = tmp_path / "labels.png"
    viz = VisualizationController(backend="Agg")
    assert viz.show_labels(sem, depth, 4, gt_sem=sem, title="f001_c0", save_path=path)
    assert path.exists()
