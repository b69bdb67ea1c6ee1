import json
import math

import numpy as np
import pytest

from latticerf.config import ConfigError
from latticerf.dataio import (DatasetError, DatasetSpec, OrbitSpec, Primitive, SyntheticScene, generate_dataset,
                              load_dataset, orbit_poses, raycast_reference, sample_surface, sphere_scene,
                              split_counts)
from latticerf.geometry import Intrinsics, look_at


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_same_seed_gives_identical_bytes(tmp_path):
    spec = DatasetSpec(n_scenes=2, n_views=3, n_holdout=1, dims=(16, 16), kind="random")
    generate_dataset(spec, tmp_path / "a", seed=11)
    generate_dataset(spec, tmp_path / "b", seed=11)
    generate_dataset(spec, tmp_path / "c", seed=12)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")


def test_round_trip_preserves_poses_and_views(tmp_path):
    spec = DatasetSpec(n_views=8, n_holdout=2, dims=(16, 20))
    generate_dataset(spec, tmp_path, seed=2)
    ds = load_dataset(tmp_path)
    scene = ds.scenes[0]
    assert len(scene.train_views) == 8 and len(scene.holdout_views) == 2
    poses = json.loads((tmp_path / "scene_000" / "poses.json").read_text())["views"]
    for view, p in zip(scene.views, poses):
        np.testing.assert_allclose(view.pose.rotation.ravel(), p["rotation"], atol=1e-12)
        R = view.pose.rotation
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert view.image.shape == (16, 20, 3) and view.mask.shape == (16, 20)
        assert view.image.min() >= 0 and view.image.max() <= 1


def test_split_ratio():
    assert split_counts(10) == (7, 2, 1)
    assert sum(split_counts(13)) == 13


def test_mask_area_matches_analytic_disc():
    # disc radius ~20 px so pixel quantisation stays well inside the 2% budget
    dims = (192, 192)
    f = 120.0
    pose = look_at(np.array([0.0, 0.0, 3.0]), intrinsics=Intrinsics(f, f, 96.0, 96.0))
    _, mask, depth = raycast_reference(sphere_scene(0.5), pose, dims)
    # a sphere of radius r at distance D projects to a disc of angular radius asin(r/D)
    disc_r = f * math.tan(math.asin(0.5 / 3.0))
    assert mask.sum() == pytest.approx(math.pi * disc_r ** 2, rel=0.02)
    np.testing.assert_array_equal(mask, np.isfinite(depth))


def test_hits_lie_on_the_surface():
    scene = SyntheticScene([Primitive("box", (0.1, 0, 0), (0.2, 0.3, 0.25), (1, 0, 0)),
                            Primitive("torus", (-0.2, 0.1, 0.1), (0.3, 0.08), (0, 1, 0))])
    pose = orbit_poses(OrbitSpec(3.0, 4), (32, 32), np.random.default_rng(0))[1]
    from latticerf.geometry import pixel_centers, rays_for_pixels
    o, d, *_ = rays_for_pixels(pose, pixel_centers(32, 32))
    _, mask, depth = raycast_reference(scene, pose, (32, 32))
    hit = mask.ravel()
    p = o[hit] + depth.ravel()[hit, None] * d[hit]
    assert hit.any() and np.abs(scene.sdf(p)).max() < 1e-4


def test_camera_inside_object():
    pose = look_at(np.array([0.0, 0.0, 0.1]), intrinsics=Intrinsics(8, 8, 4, 4))
    _, mask, _ = raycast_reference(sphere_scene(0.5), pose, (8, 8))
    assert mask.all()


def test_scene_must_fit_margin():
    with pytest.raises(ConfigError):
        sphere_scene(0.85)
    pts = sample_surface(sphere_scene(0.5), 100, np.random.default_rng(0))
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 0.5)


def test_load_errors(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        load_dataset(tmp_path)
    generate_dataset(DatasetSpec(n_views=2, n_holdout=0, dims=(8, 8)), tmp_path, seed=0)
    img = tmp_path / "scene_000" / "images" / "view_001.png"
    img.write_bytes(b"garbage")
    with pytest.raises(DatasetError, match="view_001.png"):
        load_dataset(tmp_path)


def test_convention_mismatch_rejected(tmp_path):
    generate_dataset(DatasetSpec(n_views=2, n_holdout=0, dims=(8, 8)), tmp_path, seed=0)
    p = tmp_path / "scene_000" / "poses.json"
    doc = json.loads(p.read_text())
    doc["convention"] = "opengl"
    p.write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match="convention"):
        load_dataset(tmp_path)


def test_missing_mask_warns(tmp_path, caplog):
    generate_dataset(DatasetSpec(n_views=2, n_holdout=0, dims=(8, 8)), tmp_path, seed=0)
    m = tmp_path / "manifest.json"
    doc = json.loads(m.read_text())
    doc["scenes"][0]["views"][0]["mask"] = None
    m.write_text(json.dumps(doc))
    ds = load_dataset(tmp_path)
    assert ds.scenes[0].views[0].mask is None and "no mask" in caplog.text


def test_non_orthonormal_pose_rejected(tmp_path):
    generate_dataset(DatasetSpec(n_views=2, n_holdout=0, dims=(8, 8)), tmp_path, seed=0)
    p = tmp_path / "scene_000" / "poses.json"
    doc = json.loads(p.read_text())
    doc["views"][0]["rotation"][0] *= 1.5
    p.write_text(json.dumps(doc))
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)
