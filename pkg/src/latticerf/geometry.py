"""Camera model, lattice generation, ray construction and positional encoding.

Conventions: right-handed camera frame with +z forward, +x right, +y down;
pixel origin at the top-left corner of the image, so pixel ``(row i, col j)``
has its center at ``(u, v) = (j + 0.5, i + 0.5)``.  A pose maps world points
to camera points as ``p_cam = R @ p_world + t``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import ConfigError, EncodingConfig

CONVENTION = "rh_z_forward"
Z_MIN = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: Intrinsics

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def inverse_transform(self, points_cam: np.ndarray) -> np.ndarray:
        return (np.asarray(points_cam) - self.translation) @ self.rotation

    def check(self, tol: float = 1e-9) -> None:
        R = self.rotation
        if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
            raise ConfigError("rotation is not a proper orthonormal matrix")


def look_at(center, target=(0.0, 0.0, 0.0), intrinsics: Intrinsics | None = None,
            up=(0.0, 1.0, 0.0)) -> CameraPose:
    """Pose of a camera at ``center`` whose optical axis passes through ``target``."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    if abs(up @ z) > 1.0 - 1e-9:
        up = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    y = -(up - (up @ z) * z)
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    R = np.stack([x, y, z])
    return CameraPose(R, -R @ center, intrinsics or Intrinsics(32.0, 32.0, 16.0, 16.0))


def generate_lattice(resolution: int) -> np.ndarray:
    """Uniform ``r**3`` grid over [-1, 1]^3, row-major with x varying fastest.

    Point ``(i, j, k)`` (x, y, z indices) sits at row ``i + r*j + r*r*k``.
    """
    r = int(resolution)
    if r < 2:
        raise ConfigError(f"lattice resolution must be >= 2, got {resolution}")
    axis = -1.0 + 2.0 * np.arange(r) / (r - 1)
    z, y, x = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def world_to_camera(points: np.ndarray, pose: CameraPose) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) @ pose.rotation.T + pose.translation


def camera_to_world(points_cam: np.ndarray, pose: CameraPose) -> np.ndarray:
    return pose.inverse_transform(points_cam)


def project(points_cam: np.ndarray, intr: Intrinsics, z_min: float = Z_MIN):
    """Pinhole projection; returns ``(uv, z, valid)`` with ``valid = z > z_min``."""
    p = np.asarray(points_cam, dtype=np.float64)
    z = p[..., 2]
    valid = z > z_min
    zs = np.where(valid, z, 1.0)
    u = intr.fx * p[..., 0] / zs + intr.cx
    v = intr.fy * p[..., 1] / zs + intr.cy
    uv = np.stack([u, v], axis=-1)
    uv[~valid] = np.nan
    return uv, z, valid


def positional_encode(p: np.ndarray, cfg: EncodingConfig) -> np.ndarray:
    """Encode ``(..., 3)`` coordinates into ``(..., C)`` features.

    Layout is coordinate-major, then frequency index ``j``, with each
    ``(sin, cos)`` pair adjacent: ``[sin x_0, cos x_0, sin x_1, cos x_1, ...,
    sin y_0, ...]``.
    """
    if cfg.C % 6:
        raise ConfigError("C must be a multiple of 6")
    p = np.asarray(p, dtype=np.float64)
    j = np.arange(cfg.C // 6)
    if cfg.mode == "additive":
        arg = cfg.alpha * p[..., :, None] + cfg.beta ** (j / cfg.C)
    else:
        arg = cfg.alpha * p[..., :, None] / cfg.beta ** (6.0 * j / cfg.C)
    out = np.stack([np.sin(arg), np.cos(arg)], axis=-1)
    return out.reshape(p.shape[:-1] + (cfg.C,))


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    hit: bool


def slab_intersect(origins: np.ndarray, directions: np.ndarray, lo: float = -1.0, hi: float = 1.0):
    """Entry/exit distances of rays against the axis-aligned cube [lo, hi]^3."""
    o = np.atleast_2d(origins)
    d = np.atleast_2d(directions)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    # parallel rays outside the slab never enter it
    parallel = d == 0
    outside = parallel & ((o < lo) | (o > hi))
    tmin = np.where(parallel & ~outside, -np.inf, tmin)
    tmax = np.where(parallel & ~outside, np.inf, tmax)
    t_near = np.maximum(tmin.max(axis=1), 0.0)
    t_far = tmax.min(axis=1)
    hit = (t_far > t_near) & ~outside.any(axis=1)
    return t_near, t_far, hit


def pixel_directions(pose: CameraPose, uv: np.ndarray) -> np.ndarray:
    """Unit world-frame directions through continuous pixel coordinates."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    K = pose.intrinsics
    cam = np.stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy, np.ones(len(uv))], axis=1)
    world = cam @ pose.rotation
    return world / np.linalg.norm(world, axis=1, keepdims=True)


def rays_for_pixels(pose: CameraPose, uv: np.ndarray):
    """Vectorised ray construction; returns origins, directions, t_near, t_far, hit."""
    dirs = pixel_directions(pose, uv)
    origins = np.broadcast_to(pose.center, dirs.shape).copy()
    t_near, t_far, hit = slab_intersect(origins, dirs)
    return origins, dirs, t_near, t_far, hit


def ray_for_pixel(pose: CameraPose, pixel) -> Ray:
    o, d, tn, tf, hit = rays_for_pixels(pose, np.asarray(pixel, dtype=np.float64)[None])
    if not hit[0]:
        return Ray(o[0], d[0], float("nan"), float("nan"), False)
    return Ray(o[0], d[0], float(tn[0]), float(tf[0]), True)


def pixel_centers(height: int, width: int) -> np.ndarray:
    """(H*W, 2) pixel-center coordinates in row-major order."""
    v, u = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=1)


# ---------------------------------------------------------------------------
# feature sampling


@dataclass
class BilinearTaps:
    """Constant gather indices/weights for sampling a feature map at points."""

    index: np.ndarray   # (n, 4) rows into the flattened (Hf*Wf + 1) map
    weight: np.ndarray  # (n, 4)


def bilinear_taps(uv: np.ndarray, valid: np.ndarray, image_hw, feature_hw) -> BilinearTaps:
    """Bilinear taps of feature cells for pixel coordinates ``uv``.

    Feature cell ``(a, b)`` is centred on pixel coordinate
    ``((b + 0.5) * W/Wf, (a + 0.5) * H/Hf)``.  Points outside the image or behind
    the camera reference the extra all-zero row at index ``Hf*Wf``.
    """
    H, W = image_hw
    Hf, Wf = feature_hw
    uv = np.asarray(uv, dtype=np.float64)
    n = len(uv)
    zero_row = Hf * Wf
    inside = valid & (uv[:, 0] >= 0) & (uv[:, 0] <= W) & (uv[:, 1] >= 0) & (uv[:, 1] <= H)
    fu = np.where(inside, uv[:, 0] * (Wf / W) - 0.5, 0.0)
    fv = np.where(inside, uv[:, 1] * (Hf / H) - 0.5, 0.0)
    fu = np.clip(fu, 0.0, Wf - 1.0)
    fv = np.clip(fv, 0.0, Hf - 1.0)
    b0 = np.minimum(np.floor(fu).astype(np.int64), max(Wf - 2, 0))
    a0 = np.minimum(np.floor(fv).astype(np.int64), max(Hf - 2, 0))
    b1 = np.minimum(b0 + 1, Wf - 1)
    a1 = np.minimum(a0 + 1, Hf - 1)
    du = fu - b0
    dv = fv - a0
    index = np.stack([a0 * Wf + b0, a0 * Wf + b1, a1 * Wf + b0, a1 * Wf + b1], axis=1)
    weight = np.stack([(1 - du) * (1 - dv), du * (1 - dv), (1 - du) * dv, du * dv], axis=1)
    index[~inside] = zero_row
    weight[~inside] = 0.0
    return BilinearTaps(index.reshape(n, 4), weight.reshape(n, 4))


def sample_features(feature_map, points_cam: np.ndarray, pose: CameraPose, image_hw) -> ad.Tensor:
    """Bilinearly sample an ``(Hf, Wf, C)`` feature map at projected points.

    ``feature_map`` may be a Tensor (differentiable) or an array.
    """
    fm = ad.as_tensor(feature_map)
    Hf, Wf, C = fm.shape
    uv, _, valid = project(points_cam, pose.intrinsics)
    taps = bilinear_taps(uv, valid, image_hw, (Hf, Wf))
    return gather_bilinear(fm, taps)


def gather_bilinear(feature_map: ad.Tensor, taps: BilinearTaps) -> ad.Tensor:
    Hf, Wf, C = feature_map.shape
    flat = ad.concat([ad.reshape(feature_map, (Hf * Wf, C)), np.zeros((1, C))], axis=0)
    rows = ad.take_rows(flat, taps.index)            # (n, 4, C)
    return ad.tsum(rows * taps.weight[:, :, None], axis=1)
