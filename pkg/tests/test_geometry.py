import numpy as np
import pytest

from latticerf.config import ConfigError, EncodingConfig
from latticerf.geometry import (CameraPose, Intrinsics, bilinear_taps, camera_to_world, gather_bilinear,
                                generate_lattice, look_at, pixel_centers, positional_encode, project,
                                rays_for_pixels, slab_intersect, world_to_camera)
from latticerf import autodiff as ad


def random_pose(rng, radius=3.0):
    c = rng.normal(size=3)
    c *= radius / np.linalg.norm(c)
    return look_at(c, intrinsics=Intrinsics(30.0, 32.0, 24.0, 23.0))


def test_look_at_is_a_proper_rotation_facing_target(rng):
    for _ in range(20):
        pose = random_pose(rng)
        R = pose.rotation
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0)
        origin_cam = world_to_camera(np.zeros((1, 3)), pose)[0]
        np.testing.assert_allclose(origin_cam[:2], 0.0, atol=1e-12)
        assert origin_cam[2] == pytest.approx(3.0)


def test_projection_matches_homogeneous_oracle(rng):
    pose = random_pose(rng)
    pts = rng.uniform(-1, 1, (50, 3))
    uv, z, valid = project(world_to_camera(pts, pose), pose.intrinsics)
    P = pose.intrinsics.matrix @ np.hstack([pose.rotation, pose.translation[:, None]])
    hom = (P @ np.hstack([pts, np.ones((50, 1))]).T).T
    assert valid.all()
    np.testing.assert_allclose(uv, hom[:, :2] / hom[:, 2:], rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(z, hom[:, 2])


def test_points_behind_camera_are_invalid():
    pose = look_at(np.array([0.0, 0.0, -3.0]), intrinsics=Intrinsics(10, 10, 5, 5))
    uv, _, valid = project(world_to_camera(np.array([[0.0, 0.0, -5.0]]), pose), pose.intrinsics)
    assert not valid[0] and np.isnan(uv[0]).all()


def test_world_camera_round_trip(rng):
    pose = random_pose(rng)
    pts = rng.normal(size=(10, 3))
    np.testing.assert_allclose(camera_to_world(world_to_camera(pts, pose), pose), pts, atol=1e-12)


def test_pose_check_rejects_non_rotation():
    with pytest.raises(ValueError):
        CameraPose(np.diag([1.0, 1.0, 2.0]), np.zeros(3), Intrinsics(1, 1, 0, 0)).check()


def test_lattice_layout():
    r = 5
    L = generate_lattice(r)
    assert L.shape == (125, 3)
    assert L.min() == -1.0 and L.max() == 1.0
    i, j, k = 3, 1, 4
    np.testing.assert_allclose(L[i + r * j + r * r * k], [-1 + 2 * i / 4, -1 + 2 * j / 4, -1 + 2 * k / 4])
    with pytest.raises(ConfigError):
        generate_lattice(1)


@pytest.mark.parametrize("mode", ["additive", "divisive"])
def test_positional_encoding_matches_scalar_formula(mode, rng):
    cfg = EncodingConfig(C=12, alpha=3.0, beta=50.0, mode=mode)
    p = rng.uniform(-1, 1, (4, 3))
    enc = positional_encode(p, cfg)
    assert enc.shape == (4, 12)
    for n in range(4):
        for c in range(3):
            for j in range(cfg.C // 6):
                if mode == "additive":
                    arg = cfg.alpha * p[n, c] + cfg.beta ** (j / cfg.C)
                else:
                    arg = cfg.alpha * p[n, c] / cfg.beta ** (6 * j / cfg.C)
                base = c * (cfg.C // 3) + 2 * j
                assert enc[n, base] == pytest.approx(np.sin(arg), abs=1e-14)
                assert enc[n, base + 1] == pytest.approx(np.cos(arg), abs=1e-14)


def test_encoding_rejects_bad_dimension():
    with pytest.raises(ConfigError):
        EncodingConfig(C=10)


def test_slab_intersection_against_dense_sampling(rng):
    origins = rng.uniform(-3, 3, (200, 3))
    dirs = rng.normal(size=(200, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    tn, tf, hit = slab_intersect(origins, dirs)
    ts = np.linspace(0, 12, 24001)
    for o, d, a, b, h in zip(origins, dirs, tn, tf, hit):
        inside = np.all(np.abs(o + ts[:, None] * d) <= 1.0, axis=1)
        if h and b - a > 1e-2:
            assert inside.any()
            assert ts[inside].min() == pytest.approx(a, abs=1e-3)
            assert ts[inside].max() == pytest.approx(b, abs=1e-3)
        if not h:
            assert not inside.any() or inside.sum() <= 2


def test_axis_parallel_rays():
    o = np.array([[2.0, 0.0, 0.0], [2.0, 2.0, 0.0]])
    d = np.array([[-1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    tn, tf, hit = slab_intersect(o, d)
    assert hit[0] and tn[0] == pytest.approx(1.0) and tf[0] == pytest.approx(3.0)
    assert not hit[1]


def test_pixel_rays_reproject_to_their_pixel(rng):
    pose = random_pose(rng)
    uv = pixel_centers(6, 5)
    o, d, *_ = rays_for_pixels(pose, uv)
    pts = o + 2.5 * d
    back, _, valid = project(world_to_camera(pts, pose), pose.intrinsics)
    assert valid.all()
    np.testing.assert_allclose(back, uv, atol=1e-9)


def test_bilinear_sampling_reproduces_affine_maps(rng):
    Hf, Wf = 6, 8
    image_hw = (24, 32)
    by, bx = np.meshgrid(np.arange(Hf), np.arange(Wf), indexing="ij")
    # feature value = affine function of the cell centre in pixel units
    cu = (bx + 0.5) * image_hw[1] / Wf
    cv = (by + 0.5) * image_hw[0] / Hf
    fmap = np.stack([2 * cu - cv + 1, 0.5 * cv], axis=-1)
    uv = np.stack([rng.uniform(2.0, 30.0, 40), rng.uniform(2.0, 22.0, 40)], axis=1)
    taps = bilinear_taps(uv, np.ones(40, bool), image_hw, (Hf, Wf))
    out = gather_bilinear(ad.Tensor(fmap), taps).data
    np.testing.assert_allclose(out[:, 0], 2 * uv[:, 0] - uv[:, 1] + 1, atol=1e-10)
    np.testing.assert_allclose(out[:, 1], 0.5 * uv[:, 1], atol=1e-10)


def test_out_of_frame_points_get_zero_features():
    fmap = ad.Tensor(np.ones((4, 4, 3)))
    uv = np.array([[-50.0, 3.0], [np.nan, np.nan]])
    taps = bilinear_taps(uv, np.array([True, False]), (16, 16), (4, 4))
    np.testing.assert_array_equal(gather_bilinear(fmap, taps).data, 0.0)
