import numpy as np
import pytest

from common.errors import InputError
from common.sdf import (
    OccupancyGrid,
    SemanticDensityField,
    extract_occupancy,
    init_field,
    query,
    query_points,
    softplus,
)


def _random_field(rng, dims=(4, 3, 5), num_classes=3, voxel_size=0.5):
    return SemanticDensityField(
        dims=dims,
        num_classes=num_classes,
        origin=np.array([-1.0, 0.5, 2.0]),
        voxel_size=voxel_size,
        density_params=rng.normal(size=dims),
        semantic_params=rng.normal(size=dims + (num_classes,)),
    )


def test_init_field_is_uniform():
    field = init_field((2, 2, 2), 4, (0, 0, 0), 1.0, density_init=-5.0, logit_init=0.5)
    q = query(field, [1.0, 1.0, 1.0])
    assert q.sigma == pytest.approx(float(softplus(-5.0)))
    assert np.allclose(q.sem_logits, 0.5)
    assert field.param_count == 8 * 5


def test_query_at_voxel_center_returns_voxel_value(rng):
    field = _random_field(rng)
    centers = field.voxel_centers()
    samples = query_points(field, centers)
    assert np.allclose(samples.density_pre, field.density_params.reshape(-1), atol=1e-12)
    assert np.allclose(samples.sem_logits, field.semantic_params.reshape(-1, field.num_classes), atol=1e-12)


def test_voxel_centers_follow_c_order():
    field = init_field((2, 3, 4), 2, (1.0, 2.0, 3.0), 0.5)
    centers = field.voxel_centers()
    assert np.allclose(centers[0], [1.25, 2.25, 3.25])
    assert np.allclose(centers[1], [1.25, 2.25, 3.75])
    assert np.allclose(centers[4], [1.25, 2.75, 3.25])


def test_trilinear_reproduces_linear_function():
    dims = (4, 4, 4)
    i, j, k = np.indices(dims)
    field = SemanticDensityField(
        dims=dims,
        num_classes=2,
        origin=np.zeros(3),
        voxel_size=1.0,
        density_params=i + 2.0 * j + 3.0 * k,
        semantic_params=np.zeros(dims + (2,)),
    )
    g = np.array([1.25, 0.5, 2.75])
    q = query_points(field, (g + 0.5)[None])
    assert q.density_pre[0] == pytest.approx(1.25 + 1.0 + 8.25)
    assert q.corner_weight.sum() == pytest.approx(1.0)
    assert q.corner_index.min() >= 0 and q.corner_index.max() < field.voxel_count


def test_points_near_the_boundary_clamp_to_edge_voxels(rng):
    field = _random_field(rng)
    q = query(field, field.origin)
    assert q.sigma == pytest.approx(float(softplus(field.density_params[0, 0, 0])))


def test_query_outside_box_is_rejected(rng):
    field = _random_field(rng)
    with pytest.raises(InputError):
        query(field, field.origin - 1.0)
    with pytest.raises(InputError):
        query(field, field.origin, interpolation="cubic")


def test_nearest_interpolation_picks_one_voxel(rng):
    field = _random_field(rng)
    p = field.origin + np.array([1.6, 0.4, 2.2]) * field.voxel_size
    q = query(field, p, interpolation="nearest")
    assert q.sigma == pytest.approx(float(softplus(field.density_params[1, 0, 2])))


def test_flat_params_round_trip(rng):
    field = _random_field(rng)
    other = field.copy()
    other.set_flat_params(np.zeros(field.param_count))
    other.set_flat_params(field.flat_params())
    assert np.array_equal(other.density_params, field.density_params)
    assert np.array_equal(other.semantic_params, field.semantic_params)


def test_extract_occupancy_thresholds_sigma():
    field = init_field((2, 1, 1), 3, (0, 0, 0), 1.0)
    field.density_params[:] = [[[5.0]], [[-5.0]]]
    field.semantic_params[0, 0, 0] = [0.0, 2.0, 0.0]
    field.semantic_params[1, 0, 0] = [3.0, 0.0, 0.0]
    grid = extract_occupancy(field, 0.2)
    assert grid.labels.reshape(-1).tolist() == [1, 3]
    assert extract_occupancy(field, 0.0).occupied().all()


def test_extract_occupancy_can_treat_free_class_as_empty():
    field = init_field((1, 1, 2), 3, (0, 0, 0), 1.0, density_init=5.0)
    field.semantic_params[0, 0, 0] = [0.0, 0.0, 4.0]
    field.semantic_params[0, 0, 1] = [4.0, 0.0, 0.0]
    assert extract_occupancy(field, 0.2).labels.reshape(-1).tolist() == [2, 0]
    assert extract_occupancy(field, 0.2, free_class=2).labels.reshape(-1).tolist() == [3, 0]
    with pytest.raises(InputError):
        extract_occupancy(field, -0.1)


def test_occupancy_grid_validates_labels():
    with pytest.raises(InputError):
        OccupancyGrid((1, 1, 2), np.array([0, 5]), 3)
    grid = OccupancyGrid.empty((2, 2, 2), 4)
    assert not grid.occupied().any()
    assert grid.empty_label == 4


def test_field_validates_shape():
    with pytest.raises(InputError):
        init_field((2, 2, 2), 1, (0, 0, 0), 1.0)
    with pytest.raises(InputError):
        init_field((2, 2, 2), 3, (0, 0, 0), 0.0)
