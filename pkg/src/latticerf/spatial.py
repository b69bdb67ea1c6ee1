"""Exact k-nearest-neighbour-within-radius queries over point clouds.

Results are sorted by distance with ties broken by the lower point index.
Distances are always recomputed here as ``sqrt(sum((p - q)**2))`` so that
results are reproducible bit-for-bit against a brute-force scan.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .config import ConfigError


def _dist(points: np.ndarray, queries: np.ndarray) -> np.ndarray:
    return np.sqrt(((points - queries) ** 2).sum(axis=-1))


def _select(cand: np.ndarray, dist: np.ndarray, k: int, radius: float):
    """Pick the k best candidates per row by (distance, index).

    ``cand`` must be ascending along each row with ``-1`` for padding (pads
    carry ``inf`` distance).
    """
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    idx = np.take_along_axis(cand, order, axis=1)
    d = np.take_along_axis(dist, order, axis=1)
    keep = d <= radius
    idx = np.where(keep, idx, -1)
    d = np.where(keep, d, np.inf)
    if idx.shape[1] < k:
        pad = k - idx.shape[1]
        idx = np.pad(idx, ((0, 0), (0, pad)), constant_values=-1)
        d = np.pad(d, ((0, 0), (0, pad)), constant_values=np.inf)
    return idx, d


class SpatialIndex:
    """k-d tree over an immutable point set."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ConfigError("spatial index needs a non-empty (n, 3) point array")
        if not np.isfinite(pts).all():
            raise ConfigError("point coordinates must be finite")
        self.points = pts
        self.points.setflags(write=False)
        self._tree = cKDTree(pts)

    def __len__(self):
        return len(self.points)

    def query(self, queries, k: int, radius: float):
        """Batch query; returns ``(index, distance)`` arrays of shape ``(n, k)``.

        Missing neighbours are reported as index ``-1`` with distance ``inf``.
        """
        if k < 1 or radius <= 0:
            raise ConfigError("k must be >= 1 and radius > 0")
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self.points)
        kk = min(n, k + 8)
        bound = radius * (1 + 1e-9) + 1e-12
        _, cand = self._tree.query(q, k=kk, distance_upper_bound=bound)
        cand = np.asarray(cand, dtype=np.int64).reshape(len(q), kk)
        cand = np.where(cand >= n, -1, cand)
        cand = np.sort(np.where(cand < 0, np.iinfo(np.int64).max, cand), axis=1)
        cand = np.where(cand == np.iinfo(np.int64).max, -1, cand)
        dist = np.where(cand >= 0, _dist(self.points[np.maximum(cand, 0)], q[:, None, :]), np.inf)
        idx, d = _select(cand, dist, k, radius)

        # the tree may have cut a tie group at the k-th distance; re-scan those rows
        full = (cand >= 0).all(axis=1) & (kk < n)
        if full.any():
            last = dist[np.arange(len(q)), (cand >= 0).sum(axis=1) - 1]
            kth = d[:, -1]
            risky = full & np.isfinite(kth) & (last <= kth * (1 + 1e-9) + 1e-12)
            for row in np.flatnonzero(risky):
                near = np.array(sorted(self._tree.query_ball_point(q[row], kth[row] * (1 + 1e-9) + 1e-12)),
                                dtype=np.int64)
                dd = _dist(self.points[near], q[row])
                i2, d2 = _select(near[None], dd[None], k, radius)
                idx[row], d[row] = i2[0], d2[0]
        return idx, d


class LatticeIndex:
    """Uniform-grid index specialised to a :func:`generate_lattice` point set.

    For ``k <= 8`` the exact neighbours of any query lie inside the 4x4x4 block
    of lattice points around the query's cell (the k-th neighbour is at most a
    cell diagonal away, anything outside the block at least two spacings).
    Larger ``k`` and queries outside the cube fall back to a k-d tree.
    """

    def __init__(self, points, resolution: int):
        pts = np.asarray(points, dtype=np.float64)
        if len(pts) != resolution ** 3:
            raise ConfigError("point count does not match lattice resolution")
        self.points = pts
        self.resolution = resolution
        self.spacing = 2.0 / (resolution - 1)
        self._fallback: SpatialIndex | None = None
        off = np.arange(-1, 3)
        oz, oy, ox = np.meshgrid(off, off, off, indexing="ij")
        self._offsets = np.stack([ox.ravel(), oy.ravel(), oz.ravel()], axis=1)

    def __len__(self):
        return len(self.points)

    def query(self, queries, k: int, radius: float, chunk: int = 65536):
        if k < 1 or radius <= 0:
            raise ConfigError("k must be >= 1 and radius > 0")
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if k > 8:
            if self._fallback is None:
                self._fallback = SpatialIndex(self.points)
            return self._fallback.query(q, k, radius)
        out_i = np.empty((len(q), k), dtype=np.int64)
        out_d = np.empty((len(q), k))
        r = self.resolution
        outside = (np.abs(q) > 1.0 + 0.5 * self.spacing).any(axis=1)
        if outside.any():
            if self._fallback is None:
                self._fallback = SpatialIndex(self.points)
            out_i[outside], out_d[outside] = self._fallback.query(q[outside], k, radius)
        rows = np.flatnonzero(~outside)
        for s in range(0, len(rows), chunk):
            sel = rows[s:s + chunk]
            qq = q[sel]
            cell = np.floor((qq + 1.0) / self.spacing).astype(np.int64)
            cell = np.clip(cell, -2, r)
            ijk = cell[:, None, :] + self._offsets[None]         # (m, 64, 3), index-ascending
            ok = ((ijk >= 0) & (ijk < r)).all(axis=2)
            cand = np.where(ok, ijk[..., 0] + r * ijk[..., 1] + r * r * ijk[..., 2], -1)
            dist = np.where(ok, _dist(self.points[np.maximum(cand, 0)], qq[:, None, :]), np.inf)
            out_i[sel], out_d[sel] = _select(cand, dist, k, radius)
        return out_i, out_d


def build_index(points, resolution: int | None = None):
    """Build an index; pass ``resolution`` for a lattice to get the grid fast path."""
    if resolution is not None:
        return LatticeIndex(points, resolution)
    return SpatialIndex(points)


def knn_within_radius(index, query, k: int, radius: float) -> list[tuple[int, float]]:
    idx, d = index.query(np.asarray(query, dtype=np.float64)[None], k, radius)
    return [(int(i), float(x)) for i, x in zip(idx[0], d[0]) if i >= 0]

