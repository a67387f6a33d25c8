import math

import numpy as np
import pytest

from common.errors import InputError
from common.geometry import (
    Box,
    Pinhole,
    Pose,
    Ray,
    RayBatch,
    grid_intersect,
    intersect_box,
    pixel_ray,
    pixel_rays,
    project_point,
    transform_ray,
    transform_rays,
)


def _cam():
    return Pinhole(fx=100.0, fy=80.0, cx=1.5, cy=1.5, width=3, height=3)


def test_center_pixel_looks_along_optical_axis():
    ray = pixel_ray(_cam(), Pose.identity(), 1, 1)
    assert np.allclose(ray.direction, [0.0, 0.0, 1.0])
    assert np.allclose(ray.origin, 0.0)


def test_corner_convention_shifts_by_half_pixel():
    cam = _cam()
    ray = pixel_ray(cam, Pose.identity(), 0, 0, convention="corner")
    expected = np.array([-1.5 / cam.fx, -1.5 / cam.fy, 1.0])
    assert np.allclose(ray.direction, expected / np.linalg.norm(expected))


def test_pixel_outside_image_is_rejected():
    with pytest.raises(InputError):
        pixel_ray(_cam(), Pose.identity(), 3, 0)


def test_pixel_rays_are_row_major_and_match_single_rays():
    cam = Pinhole.from_hfov(5, 4, 70.0)
    pose = Pose.from_yaw(0.3, (1.0, 2.0, 0.5))
    origins, dirs = pixel_rays(cam, pose)
    assert dirs.shape == (20, 3)
    for v in range(cam.height):
        for u in range(cam.width):
            ray = pixel_ray(cam, pose, u, v)
            assert np.allclose(dirs[v * cam.width + u], ray.direction, atol=1e-12)
            assert np.allclose(origins[v * cam.width + u], pose.translation)


def test_project_point_inverts_pixel_ray():
    cam = Pinhole.from_hfov(32, 24, 60.0)
    pose = Pose.from_yaw(-0.4, (0.2, 0.0, 1.6))
    ray = pixel_ray(cam, pose, 7, 11)
    u, v = project_point(cam, pose, ray.at(5.0))
    assert u == pytest.approx(7.5)
    assert v == pytest.approx(11.5)


def test_pose_requires_orthonormal_rotation():
    with pytest.raises(InputError):
        Pose(np.diag([1.0, 1.0, 2.0]), np.zeros(3))
    with pytest.raises(InputError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_pose_inverse_composes_to_identity():
    pose = Pose.from_yaw(0.7, (1.0, -2.0, 3.0))
    ident = pose.compose(pose.inverse())
    assert np.allclose(ident.matrix(), np.eye(4), atol=1e-12)


def test_ray_validation():
    with pytest.raises(InputError):
        Ray(origin=[0, 0, 0], direction=[1.0, 1.0, 0.0])
    with pytest.raises(InputError):
        Ray(origin=[0, 0, 0], direction=[1.0, 0.0, 0.0], t_near=2.0, t_far=1.0)
    with pytest.raises(InputError):
        Ray(origin=[0, 0, 0], direction=[1.0, 0.0, 0.0], weight=-1.0)


def test_transform_ray_same_pose_is_identity():
    ray = Ray(origin=[1, 2, 3], direction=[0, 1, 0], sem_label=2, depth_label=4.0, frame_offset=-1)
    pose = Pose.from_yaw(0.2, (1, 1, 0))
    assert transform_ray(ray, pose, pose) is ray


def test_transform_ray_moves_into_destination_frame():
    src = Pose.from_yaw(0.0, (1.0, 0.0, 0.0))
    ray = Ray(origin=[0, 0, 0], direction=[1, 0, 0], sem_label=3, depth_label=2.5, frame_offset=1)
    moved = transform_ray(ray, src, Pose.identity())
    assert np.allclose(moved.origin, [1.0, 0.0, 0.0])
    assert np.allclose(moved.direction, [1.0, 0.0, 0.0])
    assert moved.sem_label == 3
    assert moved.depth_label == 2.5
    assert moved.frame_offset == 1


def test_transform_rays_round_trip(make_batch, rng):
    dirs = rng.normal(size=(10, 3))
    batch = make_batch(rng.normal(size=(10, 3)), dirs, sem=np.arange(10))
    a = Pose.from_yaw(0.4, (2.0, -1.0, 0.0))
    b = Pose.from_yaw(-0.1, (0.5, 0.5, 0.0))
    back = transform_rays(transform_rays(batch, a, b), b, a)
    assert np.allclose(back.origins, batch.origins, atol=1e-12)
    assert np.allclose(back.directions, batch.directions, atol=1e-12)
    assert np.array_equal(back.sem_label, batch.sem_label)
    assert np.allclose(np.linalg.norm(back.directions, axis=-1), 1.0)


def test_intersect_box_entry_and_exit():
    box = Box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    t0, t1, hit = intersect_box(
        np.array([[-1.0, 0.5, 0.5], [0.5, 0.5, 0.5], [-1.0, 2.0, 0.5]]),
        np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]),
        np.zeros(3),
        np.full(3, np.inf),
        box,
    )
    assert hit.tolist() == [True, True, False]
    assert t0[0] == pytest.approx(1.0) and t1[0] == pytest.approx(2.0)
    assert t0[1] == 0.0 and t1[1] == pytest.approx(0.5)


def test_grid_intersect_respects_ray_range():
    box = Box((0.0, 0.0, 0.0), (2.0, 2.0, 2.0))
    ray = Ray(origin=[-1, 1, 1], direction=[1, 0, 0], t_far=2.0)
    assert grid_intersect(ray, box) == pytest.approx((1.0, 2.0))
    assert grid_intersect(Ray(origin=[-1, 1, 1], direction=[-1, 0, 0]), box) is None


def test_ray_batch_keeps_missing_depth():
    rays = [
        Ray(origin=[0, 0, 0], direction=[1, 0, 0], depth_label=None, sem_label=1),
        Ray(origin=[0, 0, 0], direction=[0, 1, 0], depth_label=3.0, sem_label=2),
    ]
    batch = RayBatch.from_rays(rays)
    assert batch.has_depth.tolist() == [False, True]
    back = batch.to_rays()
    assert back[0].depth_label is None
    assert back[1].depth_label == 3.0
    assert len(RayBatch.concat([batch, RayBatch.empty(), batch])) == 4


def test_box_requires_positive_extent():
    with pytest.raises(InputError):
        Box((0.0, 0.0, 0.0), (1.0, 0.0, 1.0))
    assert math.isclose(Box((0, 0, 0), (1, 1, 1)).hi[0], 1.0)
