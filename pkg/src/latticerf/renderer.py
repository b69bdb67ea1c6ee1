"""Inverse-distance-weighted lattice rendering and soft silhouette splatting."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .geometry import CameraPose, project, world_to_camera


def idw_weights(dist: np.ndarray, epsilon: float) -> np.ndarray:
    """``1 / (d^2 + eps)`` with missing neighbours (``inf``) weighted 0."""
    dist = np.asarray(dist, dtype=np.float64)
    with np.errstate(over="ignore"):
        w = 1.0 / (dist ** 2 + epsilon)
    return np.where(np.isfinite(dist), w, 0.0)


def idw_aggregate(sigmas, colors, dist, epsilon: float, background=(0.0, 0.0, 0.0)):
    """Pool neighbour densities/colours at sample points.

    Shapes: ``sigmas (n, k)``, ``colors (n, k, 3)``, ``dist (n, k)`` with ``inf``
    marking absent neighbours.  Returns ``sigma_r (n,)`` and ``c_r (n, 3)``;
    rows whose weighted density is zero get the background colour.
    """
    sigmas, colors = ad.as_tensor(sigmas), ad.as_tensor(colors)
    w = idw_weights(dist, epsilon)
    sigma_r = ad.tsum(sigmas * w, axis=1) / (w.sum(axis=1) + epsilon)
    ws = sigmas * w
    ws_sum = ad.tsum(ws, axis=1)
    num = ad.tsum(colors * ad.reshape(ws, ws.shape + (1,)), axis=1)
    c = num / ad.reshape(ws_sum + epsilon, (-1, 1))
    empty = (ws_sum.data <= 0)[:, None]
    c_r = ad.where(np.broadcast_to(~empty, c.shape), c, np.asarray(background, dtype=np.float64))
    return sigma_r, c_r


def idw_aggregate_one(neighbors, epsilon: float, background=(0.0, 0.0, 0.0)):
    """Single-point convenience: ``neighbors`` is a list of ``(sigma, rgb, dist)``."""
    if not neighbors:
        return 0.0, np.asarray(background, dtype=np.float64)
    s = np.array([[n[0] for n in neighbors]], dtype=np.float64)
    c = np.array([[n[1] for n in neighbors]], dtype=np.float64)
    d = np.array([[n[2] for n in neighbors]], dtype=np.float64)
    with ad.no_grad():
        sr, cr = idw_aggregate(s, c, d, epsilon, background)
    return float(sr.data[0]), cr.data[0]


@dataclass
class RaySampleSet:
    t: np.ndarray      # (m, n) sample distances, strictly increasing per row
    delta: np.ndarray  # (m, n) bin widths, summing to t_far - t_near

    @property
    def n_samples(self) -> int:
        return self.t.shape[1]


def sample_rays(t_near, t_far, n_samples: int, stratified: bool = False,
                rng: np.random.Generator | None = None) -> RaySampleSet:
    """Uniform bins over ``[t_near, t_far]``; midpoints, or one jittered sample per bin."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    tn = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    tf = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    length = tf - tn
    edges = tn[:, None] + length[:, None] * (np.arange(n_samples + 1) / n_samples)[None]
    width = np.diff(edges, axis=1)
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        u = rng.random((len(tn), n_samples))
    else:
        u = np.full((len(tn), n_samples), 0.5)
    t = edges[:, :-1] + u * width
    return RaySampleSet(t, width)


def sample_ray(ray, n_samples: int, stratified: bool = False, rng=None) -> RaySampleSet:
    if not ray.hit:
        return RaySampleSet(np.zeros((1, 0)), np.zeros((1, 0)))
    return sample_rays(ray.t_near, ray.t_far, n_samples, stratified, rng)


def composite(sigma, color, delta: np.ndarray, background=(0.0, 0.0, 0.0)):
    """Emission-absorption quadrature along each row.

    ``sigma (m, n)``, ``color (m, n, 3)``, ``delta (m, n)``; returns
    ``rgb (m, 3)`` and ``opacity (m,)``.
    """
    sigma, color = ad.as_tensor(sigma), ad.as_tensor(color)
    tau = sigma * delta
    acc = ad.cumsum(tau, axis=1)
    trans = ad.exp(-(acc - tau))
    alpha = 1.0 - ad.exp(-tau)
    weights = trans * alpha
    t_final = ad.exp(-acc[:, -1])
    rgb = ad.tsum(color * ad.reshape(weights, weights.shape + (1,)), axis=1)
    rgb = rgb + ad.reshape(t_final, (-1, 1)) * np.asarray(background, dtype=np.float64)
    return rgb, 1.0 - t_final


def composite_weights(sigma: np.ndarray, delta: np.ndarray):
    """Plain-array compositing weights ``T_i a_i`` and final transmittance."""
    tau = np.asarray(sigma) * delta
    acc = np.cumsum(tau, axis=-1)
    w = np.exp(-(acc - tau)) * (1.0 - np.exp(-tau))
    return w, np.exp(-acc[..., -1])


# ---------------------------------------------------------------------------
# radiance lines through the lattice field


FieldFn = Callable[[np.ndarray], "tuple[ad.Tensor, ad.Tensor]"]


@dataclass
class RayNeighborhoods:
    """Constant lattice lookups for a ray batch (shared by every source view)."""

    hit: np.ndarray         # (m,) rays that enter the cube
    samples: RaySampleSet   # for hit rays only
    unique: np.ndarray      # lattice indices that need field values
    local: np.ndarray       # (h, n, k) positions into ``unique``
    dist: np.ndarray        # (h, n, k) neighbour distances (inf = absent)


def gather_neighborhoods(index, origins, dirs, t_near, t_far, hit, n_samples: int, k: int,
                         radius: float, stratified: bool = False, rng=None) -> RayNeighborhoods:
    hit = np.asarray(hit, dtype=bool)
    samples = sample_rays(t_near[hit], t_far[hit], n_samples, stratified, rng)
    pts = origins[hit][:, None, :] + samples.t[..., None] * dirs[hit][:, None, :]
    h, n = samples.t.shape
    idx, dist = index.query(pts.reshape(-1, 3), k, radius)
    valid = idx >= 0
    unique, inv = np.unique(idx[valid], return_inverse=True)
    local = np.zeros(idx.shape, dtype=np.int64)
    local[valid] = inv
    return RayNeighborhoods(hit, samples, unique, local.reshape(h, n, k), dist.reshape(h, n, k))


def render_neighborhoods(sigma_u, rgb_u, nb: RayNeighborhoods, epsilon: float,
                         background=(0.0, 0.0, 0.0)):
    """Composite pixel colours from field values at ``nb.unique`` lattice points.

    Returns ``rgb (m, 3)`` and ``opacity (m,)`` for every ray of the batch; rays
    that miss the cube show the background.
    """
    bg = np.asarray(background, dtype=np.float64)
    h, n, k = nb.local.shape
    m = len(nb.hit)
    if h == 0:
        return ad.Tensor(np.broadcast_to(bg, (m, 3)).copy()), ad.Tensor(np.zeros(m))
    flat = nb.local.reshape(-1)
    s = ad.reshape(ad.take_rows(sigma_u, flat), (h * n, k))
    c = ad.reshape(ad.take_rows(rgb_u, flat), (h * n, k, 3))
    sr, cr = idw_aggregate(s, c, nb.dist.reshape(h * n, k), epsilon, bg)
    rgb, opac = composite(ad.reshape(sr, (h, n)), ad.reshape(cr, (h, n, 3)), nb.samples.delta, bg)
    if h == m:
        return rgb, opac
    rows = np.flatnonzero(nb.hit)
    miss = np.flatnonzero(~nb.hit)
    order = np.argsort(np.concatenate([rows, miss]), kind="stable")
    rgb_all = ad.concat([rgb, np.broadcast_to(bg, (len(miss), 3))], axis=0)
    op_all = ad.concat([opac, np.zeros(len(miss))], axis=0)
    return ad.take_rows(rgb_all, order), ad.take_rows(op_all, order)


# ---------------------------------------------------------------------------
# silhouettes


@dataclass
class SplatFootprint:
    """Constant (point, pixel, gaussian) triples for one view."""

    point: np.ndarray
    pixel: np.ndarray
    gauss: np.ndarray
    height: int
    width: int


def splat_footprint(points: np.ndarray, pose: CameraPose, dims, splat_sigma_px: float,
                    truncate: float = 3.0) -> SplatFootprint:
    H, W = dims
    uv, _, valid = project(world_to_camera(points, pose), pose.intrinsics)
    R = int(np.ceil(truncate * splat_sigma_px))
    pts = np.flatnonzero(valid & (uv[:, 0] > -R) & (uv[:, 0] < W + R)
                         & (uv[:, 1] > -R) & (uv[:, 1] < H + R))
    uvp = uv[pts]
    base_j = np.floor(uvp[:, 0]).astype(np.int64)
    base_i = np.floor(uvp[:, 1]).astype(np.int64)
    off = np.arange(-R, R + 1)
    oi, oj = np.meshgrid(off, off, indexing="ij")
    jj = base_j[:, None] + oj.ravel()[None]
    ii = base_i[:, None] + oi.ravel()[None]
    d2 = (jj + 0.5 - uvp[:, :1]) ** 2 + (ii + 0.5 - uvp[:, 1:]) ** 2
    keep = (jj >= 0) & (jj < W) & (ii >= 0) & (ii < H) & (d2 <= (truncate * splat_sigma_px) ** 2)
    gauss = np.exp(-d2 / (2.0 * splat_sigma_px ** 2))
    point = np.broadcast_to(pts[:, None], jj.shape)[keep]
    return SplatFootprint(point, (ii * W + jj)[keep], gauss[keep], H, W)


def splat_silhouette(sigma, fp: SplatFootprint) -> ad.Tensor:
    """Soft occupancy ``1 - prod(1 - (1 - exp(-sigma)) g)`` per pixel, shape (H, W)."""
    sigma = ad.as_tensor(sigma)
    e = ad.take_rows(ad.exp(-sigma), fp.point)
    keep = 1.0 - fp.gauss + fp.gauss * e
    logs = ad.segment_sum(ad.log(keep), fp.pixel, fp.height * fp.width)
    return ad.reshape(1.0 - ad.exp(logs), (fp.height, fp.width))


def render_silhouette(sigma, points: np.ndarray, pose: CameraPose, dims, splat_sigma_px: float = 1.0):
    """Soft silhouette of a density-weighted point cloud seen from ``pose``."""
    return splat_silhouette(sigma, splat_footprint(points, pose, dims, splat_sigma_px))
