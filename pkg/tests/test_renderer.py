import numpy as np
import pytest

from common.geometry import Ray
from common.renderer import RayRenderError, clip_to_field, render_batch, render_ray, render_rays, render_samples
from common.runtime.config import RendererConfig
from common.runtime.workers import BlockExecutor
from common.samplers import SampleBatch, SampleSet, sample_unified
from common.sdf import OccupancyGrid, init_field, softplus
from common.synthworld import grid_to_field

NO_JITTER = RendererConfig(jitter=False)


def _wall_field(num_classes=3, wall_class=1):
    dims = (8, 3, 3)
    labels = np.full(dims, num_classes)
    labels[5] = wall_class
    return grid_to_field(OccupancyGrid(dims, labels, num_classes), np.zeros(3), 1.0)


def test_constant_field_matches_closed_form(make_batch):
    field = init_field((4, 4, 4), 3, (0, 0, 0), 1.0, density_init=0.3)
    field.semantic_params[..., 1] = 2.0
    rays = make_batch([[-1.0, 2.0, 2.0]], [[1.0, 0.0, 0.0]])
    clipped, hit = clip_to_field(field, rays)
    result = render_rays(field, clipped, NO_JITTER)
    sigma = float(softplus(0.3))
    opacity = 1.0 - np.exp(-sigma * 4.0)
    assert hit.all()
    assert result.opacity[0] == pytest.approx(opacity)
    assert np.allclose(result.sem_pix[0], [0.0, 2.0 * opacity, 0.0])
    block = result.blocks[0]
    assert np.allclose(block.weights.sum(axis=1), result.opacity)


def test_opaque_wall_gives_entry_depth_and_class(make_batch):
    field = _wall_field()
    rays = make_batch([[-1.0, 1.5, 1.5]], [[1.0, 0.0, 0.0]])
    out = render_batch(field, rays, NO_JITTER)[0]
    assert out.opacity > 0.99
    assert int(np.argmax(out.sem_pix)) == 1
    assert abs(out.depth_pix - 6.0) < 0.5


def test_rays_missing_the_field_render_as_transparent(make_batch):
    field = _wall_field()
    rays = make_batch([[-1.0, 1.5, 1.5], [-1.0, 1.5, 1.5]], [[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    outs = render_batch(field, rays, NO_JITTER)
    assert outs[0].opacity == 0.0 and outs[0].depth_pix == 0.0
    assert not outs[0].sem_pix.any()
    assert outs[1].opacity > 0.99


def test_render_ray_with_no_samples_is_zero():
    field = init_field((2, 2, 2), 2, (0, 0, 0), 1.0)
    ray = Ray(origin=[0.0, 1.0, 1.0], direction=[1.0, 0.0, 0.0])
    out = render_ray(field, ray, SampleSet([], [], 0.0, 1.0))
    assert out.opacity == 0.0 and out.depth_pix == 0.0
    assert len(out.weights) == 0


def test_render_ray_matches_batch_path():
    field = init_field((4, 4, 4), 2, (0, 0, 0), 1.0, density_init=-0.5)
    field.density_params[2] = 1.5
    ray = Ray(origin=[0.0, 2.0, 2.0], direction=[1.0, 0.0, 0.0], t_far=4.0)
    single = render_ray(field, ray, sample_unified(0.0, 4.0, 0.5))
    batched = render_batch(field, [ray], NO_JITTER)[0]
    assert single.opacity == pytest.approx(batched.opacity, abs=1e-12)
    assert single.depth_pix == pytest.approx(batched.depth_pix, abs=1e-12)


def test_probability_accumulation_sums_to_opacity(make_batch, rng):
    field = init_field((4, 4, 4), 4, (0, 0, 0), 1.0, density_init=0.0)
    field.semantic_params[:] = rng.normal(size=field.semantic_params.shape)
    rays = make_batch([[-1.0, 1.2, 2.7], [2.0, -1.0, 1.0]], [[1.0, 0.1, 0.0], [0.0, 1.0, 0.2]])
    clipped, _ = clip_to_field(field, rays)
    result = render_rays(field, clipped, RendererConfig(jitter=False, sem_accumulation="probs"))
    assert np.allclose(result.sem_pix.sum(axis=1), result.opacity)


def test_sample_outside_field_reports_ray_index(make_batch):
    field = init_field((2, 2, 2), 2, (0, 0, 0), 1.0)
    rays = make_batch([[0.0, 1.0, 1.0]], [[1.0, 0.0, 0.0]])
    samples = SampleBatch(
        t=np.array([[10.0]]),
        delta=np.array([[0.1]]),
        mask=np.array([[True]]),
        t_near=np.array([0.0]),
        t_far=np.array([20.0]),
    )
    with pytest.raises(RayRenderError) as exc:
        render_samples(field, rays, samples, ray_offset=7)
    assert exc.value.ray_index == 7


def test_training_render_is_independent_of_worker_count(make_batch, rng):
    field = init_field((6, 6, 6), 3, (0, 0, 0), 0.5, density_init=0.2)
    field.density_params[:] = rng.normal(size=field.dims)
    n = 50
    origins = np.column_stack([np.full(n, -0.5), rng.uniform(0.2, 2.8, n), rng.uniform(0.2, 2.8, n)])
    dirs = np.column_stack([np.ones(n), rng.uniform(-0.3, 0.3, n), rng.uniform(-0.3, 0.3, n)])
    clipped, _ = clip_to_field(field, make_batch(origins, dirs))
    config = RendererConfig(block_size=8)
    with BlockExecutor(1, 8) as one, BlockExecutor(4, 8) as four:
        a = render_rays(field, clipped, config, seed=3, iteration=5, training=True, executor=one)
        b = render_rays(field, clipped, config, seed=3, iteration=5, training=True, executor=four)
    assert np.array_equal(a.sem_pix, b.sem_pix)
    assert np.array_equal(a.depth_pix, b.depth_pix)
    c = render_rays(field, clipped, config, seed=3, iteration=6, training=True)
    assert not np.array_equal(a.depth_pix, c.depth_pix)


def test_hierarchical_renderer_finds_the_wall(make_batch):
    field = _wall_field()
    rays = make_batch([[-1.0, 1.5, 1.5]], [[1.0, 0.0, 0.0]])
    config = RendererConfig(sampler="hierarchical", n_coarse=16, n_fine=32, jitter=False)
    out = render_batch(field, rays, config)[0]
    assert out.opacity > 0.99
    assert abs(out.depth_pix - 6.0) < 0.25
