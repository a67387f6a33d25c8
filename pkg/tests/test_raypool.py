import logging

import numpy as np
import pytest
from scipy import stats

from common.errors import InputError
from common.geometry import Ray
from common.raypool import (
    FrameLabels,
    RayPool,
    balance_weight,
    balance_weights,
    build_pool,
    pool_from_scene,
    sample_batch,
    sample_indices,
    temporal_weight,
    temporal_weights,
    window_offsets,
)
from common.runtime.config import RayPoolConfig


def _manual_pool(make_batch, weights, **cfg):
    n = len(weights)
    rays = make_batch(np.zeros((n, 3)), np.tile([1.0, 0.0, 0.0], (n, 1)), sem=np.zeros(n, dtype=np.int64))
    w = np.asarray(weights, dtype=np.float64)
    return RayPool(
        rays=rays,
        class_counts=np.array([n]),
        balance=np.ones(n),
        temporal=np.ones(n),
        weights=w,
        config=RayPoolConfig(**cfg),
        dynamic_classes=(),
        current_index=0,
    )


def test_window_offsets_order():
    assert window_offsets(0) == (0,)
    assert window_offsets(4) == (0, -1, 1, -2, 2)
    with pytest.raises(InputError):
        window_offsets(3)


def test_balance_weights_formula_and_cap():
    counts = np.array([100, 10, 1])
    w = balance_weights(np.array([0, 1, 2]), counts, 0.5, 100.0)
    assert w[0] == 1.0
    assert w[1] == pytest.approx(np.exp(4.5))
    assert w[2] == 100.0
    with pytest.raises(InputError):
        balance_weights(np.array([0]), np.array([0, 5]), 0.5, 100.0)


def test_temporal_weights_per_ray_kind():
    config = RayPoolConfig(lambda_dyn=0.1, lambda_adj=0.7)
    w = temporal_weights(np.array([0, 1, -1, 0]), np.array([2, 2, 0, 2]), config, [2])
    assert w.tolist() == [1.0, 0.1, 0.7, 1.0]
    ray = Ray(origin=[0, 0, 0], direction=[1, 0, 0], sem_label=2, frame_offset=-2)
    assert temporal_weight(ray, config, [2]) == pytest.approx(0.1)
    assert temporal_weight(ray, config) == pytest.approx(0.7)


def test_pool_from_scene_window_and_weights(tiny_scene):
    pool = pool_from_scene(tiny_scene, RayPoolConfig(m_aux=2))
    assert set(np.unique(pool.rays.frame_offset)) == {-1, 0, 1}
    assert pool.num_classes == tiny_scene.num_classes
    assert pool.class_counts.sum() == len(pool)
    current = pool.rays.frame_offset == 0
    assert np.all(pool.temporal[current] == 1.0)
    dynamic = np.isin(pool.rays.sem_label, tiny_scene.dynamic_classes)
    assert np.all(pool.temporal[~current & dynamic] == pytest.approx(0.1))
    assert np.all(pool.temporal[~current & ~dynamic] == pytest.approx(0.7))
    assert np.allclose(pool.weights, pool.balance * pool.temporal)
    assert np.all(pool.rays.t_near <= pool.rays.t_far)
    summary = pool.summary()
    assert summary["rays"] == len(pool)
    assert set(summary["rays_per_offset"]) == {-1, 0, 1}
    ray = pool.rays.ray(0)
    assert balance_weight(pool, ray) == pytest.approx(pool.balance[0])


def test_auxiliary_static_rays_land_on_the_same_voxel_label(tiny_scene):
    """隣接フレームのレイを現フレームへ移すと、静的クラスの当たり点は現フレームの GT と一致する。"""
    pool = pool_from_scene(tiny_scene, RayPoolConfig(m_aux=2))
    rays = pool.rays
    static = ~np.isin(rays.sem_label, tiny_scene.dynamic_classes) & (rays.sem_label != tiny_scene.free_class)
    pick = (rays.frame_offset != 0) & static & rays.has_depth
    assert pick.sum() > 100
    points = rays.origins[pick] + (rays.depth_label[pick] + 1e-6)[:, None] * rays.directions[pick]
    idx = np.floor((points - tiny_scene.origin) / tiny_scene.voxel_size).astype(int)
    idx = np.clip(idx, 0, np.asarray(tiny_scene.dims) - 1)
    grid = tiny_scene.reference_grid.labels
    found = grid[idx[:, 0], idx[:, 1], idx[:, 2]]
    assert np.mean(found == rays.sem_label[pick]) > 0.99


def test_build_pool_reports_missing_frame(tiny_scene):
    with pytest.raises(InputError, match="フレーム -1"):
        pool_from_scene(tiny_scene, RayPoolConfig(m_aux=6))
    frames = [
        FrameLabels(tiny_scene.ego_poses[i], [tiny_scene.label_image(i, c) for c in range(len(tiny_scene.rig))])
        for i in range(3)
    ]
    frames[2] = None
    with pytest.raises(InputError, match="フレーム 2"):
        build_pool(frames, 1, 2, tiny_scene.rig, tiny_scene.bounds)


def test_weighted_sampling_never_picks_zero_weight(make_batch, rng):
    pool = _manual_pool(make_batch, [0.0, 1.0, 0.0, 3.0, 0.0])
    idx = sample_indices(pool, 20000, rng)
    assert set(np.unique(idx)) <= {1, 3}
    observed = np.array([np.sum(idx == 1), np.sum(idx == 3)])
    assert stats.chisquare(observed, [5000, 15000]).pvalue > 1e-3


def test_weighted_sampling_with_trailing_zero_weights(make_batch, rng):
    pool = _manual_pool(make_batch, [1.0, 0.0, 0.0])
    assert np.all(sample_indices(pool, 500, rng) == 0)


def test_without_replacement_caps_to_positive_weights(make_batch, rng, caplog):
    pool = _manual_pool(make_batch, [1.0, 0.0, 2.0, 4.0], with_replacement=False)
    with caplog.at_level(logging.WARNING, logger="common.raypool"):
        idx = sample_indices(pool, 10, rng)
    assert sorted(idx.tolist()) == [0, 2, 3]
    assert "切り詰め" in caplog.text


def test_unweighted_sampling_is_uniform(make_batch, rng):
    pool = _manual_pool(make_batch, [0.0, 0.0, 1.0, 0.0], weighted=False)
    idx = sample_indices(pool, 8000, rng)
    counts = np.bincount(idx, minlength=4)
    assert stats.chisquare(counts).pvalue > 1e-3
    no_rep = _manual_pool(make_batch, [1.0] * 6, weighted=False, with_replacement=False)
    assert sorted(sample_indices(no_rep, 6, rng).tolist()) == list(range(6))


def test_sampling_errors_and_determinism(make_batch):
    pool = _manual_pool(make_batch, [1.0, 2.0, 3.0])
    with pytest.raises(InputError):
        sample_indices(pool, 0, np.random.default_rng(0))
    a = sample_indices(pool, 50, np.random.default_rng(5))
    b = sample_indices(pool, 50, np.random.default_rng(5))
    assert np.array_equal(a, b)
    assert len(sample_batch(pool, 7, np.random.default_rng(1))) == 7
    dead = _manual_pool(make_batch, [0.0, 0.0])
    with pytest.raises(InputError):
        sample_indices(dead, 1, np.random.default_rng(0))
