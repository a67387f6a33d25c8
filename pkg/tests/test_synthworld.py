import json

import numpy as np
import pytest

from common.errors import ConfigError, InputError
from common.evalio.metrics import render_eval
from common.geometry import Pose
from common.runtime.config import RendererConfig
from common.sdf import OccupancyGrid
from common.synthworld import (
    PROFILES,
    LabelImage,
    cast_rays,
    gen_scene,
    grid_to_field,
    load_scene,
    resolve_spec,
    save_scene,
)


def _line_grid():
    labels = np.full((4, 1, 1), 3)
    labels[2] = 2
    return OccupancyGrid((4, 1, 1), labels, 3)


def test_cast_rays_hand_cases():
    grid = _line_grid()
    origins = np.array([[-1.0, 0.5, 0.5], [2.5, 0.5, 0.5], [5.0, 0.5, 0.5], [-1.0, 5.0, 0.5]])
    dirs = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    cls, depth = cast_rays(grid, np.zeros(3), 1.0, origins, dirs)
    assert cls.tolist() == [2, 2, 2, -1]
    assert depth[0] == pytest.approx(3.0)
    assert depth[1] == 0.0
    assert depth[2] == pytest.approx(2.0)
    assert np.isnan(depth[3])


def _march(grid, origin, vs, o, d, dt=0.005, t_max=20.0):
    ts = np.arange(0.0, t_max, dt)
    pts = o + ts[:, None] * d
    idx = np.floor((pts - origin) / vs).astype(int)
    inside = np.all((idx >= 0) & (idx < np.asarray(grid.dims)), axis=1)
    lab = np.full(len(ts), grid.empty_label)
    lab[inside] = grid.labels[idx[inside, 0], idx[inside, 1], idx[inside, 2]]
    occupied = np.flatnonzero(lab != grid.empty_label)
    if len(occupied) == 0:
        return -1, np.nan
    return int(lab[occupied[0]]), float(ts[occupied[0]])


def test_cast_rays_agrees_with_dense_marching(tiny_scene, rng):
    grid = tiny_scene.reference_grid
    n = 200
    origins = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.uniform(0.5, 2.5, n)])
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    cls, depth = cast_rays(grid, tiny_scene.origin, tiny_scene.voxel_size, origins, dirs)
    agree = 0
    for i in range(n):
        c, t = _march(grid, tiny_scene.origin, tiny_scene.voxel_size, origins[i], dirs[i])
        if c == cls[i] and (c < 0 or abs(t - depth[i]) <= 0.01):
            agree += 1
    assert agree >= 0.95 * n


def test_tiny_profile_layout(tiny_scene):
    assert tiny_scene.num_classes == 5
    assert tiny_scene.free_class == 4
    assert tiny_scene.dynamic_classes == [2]
    assert tiny_scene.frame_count == 3 and tiny_scene.reference == 1
    assert len(tiny_scene.rig) == 4
    assert tiny_scene.ego_poses[1].same_as(Pose.identity())
    assert tiny_scene.bounds.lo == (-4.0, -4.0, -1.0)
    assert tiny_scene.bounds.hi == (4.0, 4.0, 3.0)


def test_static_classes_stay_put_and_cars_move(tiny_scene):
    grids = [g.labels for g in tiny_scene.grids]
    for c in (0, 1, 3):
        assert np.array_equal(grids[0] == c, grids[1] == c)
        assert np.array_equal(grids[1] == c, grids[2] == c)
    car = [g == 2 for g in grids]
    assert car[1].any()
    assert not np.array_equal(car[0], car[2])
    # 0.5 m/フレーム = 1 ボクセル
    assert np.array_equal(np.roll(car[1], 1, axis=0), car[2])


def test_camera_rays_follow_the_ego_trajectory(tiny_scene):
    origins, dirs = tiny_scene.camera_rays(0, 0)
    assert np.allclose(origins, [-0.5, 0.0, 1.0])
    forward = dirs.mean(axis=0)
    assert forward[0] / np.linalg.norm(forward) > 0.9
    with pytest.raises(InputError):
        tiny_scene.camera_rays(3, 0)


def test_label_images_are_consistent(tiny_scene):
    img = tiny_scene.label_image(1, 0)
    assert img.shape == (16, 24)
    assert np.array_equal(img.valid, img.sem != tiny_scene.free_class)
    assert img.valid.any()
    with pytest.raises(InputError):
        LabelImage(np.array([[0]]), np.array([[np.nan]]), 4)


def test_ground_truth_field_reproduces_labels(tiny_scene):
    field = grid_to_field(tiny_scene.reference_grid, tiny_scene.origin, tiny_scene.voxel_size)
    report = render_eval(field, tiny_scene, tiny_scene.reference, renderer_config=RendererConfig(jitter=False))
    assert report.pixel_count == 4 * 16 * 24
    assert report.sem_pixel_accuracy > 0.85
    assert report.depth_abs_rel < 0.15


def test_save_and_load_round_trip(tiny_scene, tmp_path):
    manifest = save_scene(tiny_scene, tmp_path)
    assert len(manifest["labels"]) == 12
    assert (tmp_path / "grids" / "frame_002.occ").exists()
    assert (tmp_path / "labels" / "f001_c3_sem.ppm").exists()
    assert json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))["free_class"] == 4

    loaded = load_scene(tmp_path)
    assert loaded.num_classes == tiny_scene.num_classes
    assert loaded.dynamic_classes == [2]
    for a, b in zip(loaded.grids, tiny_scene.grids):
        assert a == b
    for a, b in zip(loaded.ego_poses, tiny_scene.ego_poses):
        assert a.same_as(b)
    a = loaded.label_image(1, 2)
    b = tiny_scene.label_image(1, 2)
    assert np.array_equal(a.sem, b.sem)
    assert np.allclose(a.depth[b.valid], b.depth[b.valid], atol=5e-4)


def test_save_without_color(tiny_scene, tmp_path):
    manifest = save_scene(tiny_scene, tmp_path, color=False)
    assert "color" not in manifest["labels"][0]
    assert not list((tmp_path / "labels").glob("*.ppm"))


def test_load_scene_requires_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_scene(tmp_path)


def test_resolve_spec_merges_profile():
    spec = resolve_spec({"profile": "tiny", "rig": {"cameras": 2}})
    assert spec["rig"]["cameras"] == 2
    assert spec["rig"]["width"] == PROFILES["tiny"]["rig"]["width"]
    assert resolve_spec(None)["profile"] == "default"


@pytest.mark.parametrize(
    "spec, pointer",
    [
        ({"bogus": 1}, "/bogus"),
        ({"profile": "city"}, "/profile"),
        ({"profile": "tiny", "classes": [{"id": 1, "name": "road"}]}, "/classes/0/id"),
        (
            {"profile": "tiny", "objects": [{"type": "box", "class": 1, "min": [0, 0, 0], "max": [1, 1, 1], "velocity": [1, 0, 0]}]},
            "/objects/0/velocity",
        ),
        ({"profile": "tiny", "objects": [{"type": "sphere", "class": 0}]}, "/objects/0/type"),
        ({"profile": "tiny", "grid": {"dims": [4, 4, 0]}}, "/grid/dims"),
    ],
)
def test_gen_scene_reports_config_pointer(spec, pointer):
    with pytest.raises(ConfigError) as exc:
        gen_scene(spec, seed=0)
    assert exc.value.pointer == pointer


def test_ablation_profile_requires_dynamic_and_rare_objects():
    with pytest.raises(ConfigError) as exc:
        gen_scene({"profile": "ablation", "objects": [{"type": "ground", "class": 0, "height": 0.8}]}, seed=0)
    assert exc.value.pointer == "/objects"


def test_jittered_scene_is_reproducible():
    spec = {"profile": "tiny", "jitter_objects": 2}
    a = gen_scene(spec, seed=5)
    b = gen_scene(spec, seed=5)
    assert len(a.spec["objects"]) == len(PROFILES["tiny"]["objects"]) + 2
    assert a.spec["jitter_objects"] == 0
    for ga, gb in zip(a.grids, b.grids):
        assert ga == gb
