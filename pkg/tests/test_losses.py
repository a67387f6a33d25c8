import math

import numpy as np
import pytest

from common.errors import InputError
from common.gradients import make_check_problem
from common.losses import depth_loss, distortion_loss, occ3d_loss, seg_loss, total_loss, tv_loss
from common.renderer import clip_to_field, render_rays
from common.runtime.config import LossConfig, RendererConfig
from common.samplers import SampleSet
from common.sdf import OccupancyGrid, init_field
from common.synthworld import grid_to_field


def test_seg_loss_uniform_logits():
    assert seg_loss([0.0, 0.0, 0.0], 1) == pytest.approx(math.log(3.0))
    assert seg_loss([0.0, 30.0, 0.0], 1) < 1e-12


def test_seg_loss_probs_mode_and_range():
    assert seg_loss([0.2, 0.8], 1, accumulation="probs") == pytest.approx(-math.log(0.8 + 1e-10))
    with pytest.raises(InputError):
        seg_loss([0.0, 0.0], 2)


def test_silog_is_scale_invariant_with_full_variance_term():
    gt = np.array([1.0, 2.0, 5.0])
    assert depth_loss(gt, gt) == pytest.approx(0.0)
    assert depth_loss(2.0 * gt, gt, lambda_var=1.0) == pytest.approx(0.0, abs=1e-12)
    assert depth_loss(2.0 * gt, gt, lambda_var=0.85) == pytest.approx(0.15 * math.log(2.0) ** 2)


def test_depth_loss_rejects_invalid_depths():
    with pytest.raises(InputError):
        depth_loss([0.0, 1.0], [1.0, 1.0])
    with pytest.raises(InputError):
        depth_loss([1.0], [1.0, 2.0])
    with pytest.raises(InputError):
        depth_loss([], [])


def test_distortion_single_sample():
    s = SampleSet([0.5], [1.0], 0.0, 1.0)
    assert distortion_loss(s, [0.6]) == pytest.approx(0.36 / 3.0)


def test_distortion_matches_pairwise_definition(rng):
    s = SampleSet([0.25, 0.75, 1.5, 2.5], [0.5, 0.5, 1.0, 1.0], 0.0, 3.0)
    w = rng.uniform(0.0, 0.5, 4)
    m = s.midpoints
    brute = sum(w[i] * w[j] * abs(m[i] - m[j]) for i in range(4) for j in range(4))
    brute += np.sum(w * w * s.deltas) / 3.0
    assert distortion_loss(s, w) == pytest.approx(brute)
    with pytest.raises(InputError):
        distortion_loss(s, w[:3])


def test_tv_loss():
    field = init_field((2, 1, 1), 2, (0, 0, 0), 1.0)
    assert tv_loss(field) == 0.0
    field.density_params[1] = 1.0
    assert tv_loss(field) == pytest.approx(1.0)


def test_occ3d_loss_vanishes_for_saturated_ground_truth(rng):
    labels = rng.integers(0, 4, (4, 4, 3))
    gt = OccupancyGrid((4, 4, 3), labels, 3)
    field = grid_to_field(gt, np.zeros(3), 0.5)
    assert occ3d_loss(field, gt) < 1e-6
    assert occ3d_loss(init_field((4, 4, 3), 3, (0, 0, 0), 0.5), gt) > 1.0


def _rendered_problem(seed=0, depth_valid=True):
    field, rays, gt = make_check_problem(seed, dims=(4, 4, 4), num_classes=3, n_rays=6)
    if not depth_valid:
        rays.depth_label[:] = np.nan
    clipped, _ = clip_to_field(field, rays)
    return field, render_rays(field, clipped, RendererConfig(jitter=False)), gt


def test_total_loss_is_weighted_sum():
    field, result, gt = _rendered_problem()
    config = LossConfig(w_seg=1.0, w_depth=0.5, w_dist=0.2, w_tv=0.3, w_occ3d=0.7)
    report = total_loss(result, field, config, gt_grid=gt)
    expected = (
        report.l_seg + 0.5 * report.l_depth + 0.2 * report.l_dist + 0.3 * report.l_tv + 0.7 * report.l_occ3d
    )
    assert report.total == pytest.approx(expected)
    assert report.is_finite()
    assert report.counts["rays"] == 6


def test_rays_without_depth_skip_depth_term():
    field, result, _ = _rendered_problem(depth_valid=False)
    report = total_loss(result, field, LossConfig())
    assert report.counts["depth"] == 0
    assert report.l_depth == 0.0


def test_occ3d_weight_requires_ground_truth():
    field, result, _ = _rendered_problem()
    with pytest.raises(InputError):
        total_loss(result, field, LossConfig(w_occ3d=1.0))
