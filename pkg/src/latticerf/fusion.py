"""Per-view field evaluation, multi-view fusion and explicit cloud extraction."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .config import EncodingConfig, TrainConfig
from .geometry import (CameraPose, bilinear_taps, gather_bilinear, generate_lattice, pixel_centers,
                       positional_encode, project, rays_for_pixels, slab_intersect, world_to_camera)
from .nnet import FieldModel, forward_mlp
from .losses import view_weight
from .renderer import gather_neighborhoods, idw_aggregate, render_neighborhoods
from .spatial import build_index

log = logging.getLogger(__name__)


@dataclass
class ViewContext:
    """A conditioning view: pose, image size and its encoder feature map."""

    pose: CameraPose
    dims: tuple
    features: ad.Tensor

    @property
    def center(self) -> np.ndarray:
        return self.pose.center


def make_context(model: FieldModel, view) -> ViewContext:
    return ViewContext(view.pose, tuple(view.dims), model.encoder(view.image))


@dataclass
class PointConstants:
    """View-dependent constant inputs for a fixed point set."""

    taps: object
    encodings: np.ndarray   # (n, 2C): [PosE(x), PosE(d)]


def point_constants(points: np.ndarray, pose: CameraPose, dims, feature_hw,
                    enc: EncodingConfig) -> PointConstants:
    uv, _, valid = project(world_to_camera(points, pose), pose.intrinsics)
    taps = bilinear_taps(uv, valid, dims, feature_hw)
    d = points - pose.center
    d = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    return PointConstants(taps, np.concatenate([positional_encode(points, enc),
                                                positional_encode(d, enc)], axis=1))


def field_from_constants(model: FieldModel, ctx: ViewContext, const: PointConstants):
    feats = gather_bilinear(ctx.features, const.taps)
    C = model.encoding.C
    return forward_mlp(feats, const.encodings[:, :C], const.encodings[:, C:], model.mlp)


def evaluate_field(model: FieldModel, ctx: ViewContext, points: np.ndarray):
    """Density and colour at world points, conditioned on one view (differentiable)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    const = point_constants(points, ctx.pose, ctx.dims, ctx.features.shape[:2], model.encoding)
    return field_from_constants(model, ctx, const)


def per_view_field(points, view_ctx: ViewContext, model: FieldModel, chunk: int = 65536):
    """Inference-only field values ``(rgb (n, 3), sigma (n,))`` for one view."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    rgb = np.empty((len(points), 3))
    sigma = np.empty(len(points))
    with ad.no_grad():
        for s in range(0, len(points), chunk):
            sg, c = evaluate_field(model, view_ctx, points[s:s + chunk])
            sigma[s:s + chunk] = sg.data
            rgb[s:s + chunk] = c.data
    return rgb, sigma


# ---------------------------------------------------------------------------
# fusion


def transmittance(points: np.ndarray, center: np.ndarray, sigma_fn, n_samples: int = 32,
                  chunk: int = 8192) -> np.ndarray:
    """``exp(-integral sigma ds)`` from the cube entry toward each point.

    Midpoint rule with ``n_samples`` uniform bins between the entry distance
    and the point's distance along the ray from ``center``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        vec = p - center
        dist = np.linalg.norm(vec, axis=1)
        dirs = vec / np.maximum(dist, 1e-12)[:, None]
        t_near, _, hit = slab_intersect(np.broadcast_to(center, p.shape), dirs)
        t_near = np.where(hit, t_near, dist)
        length = np.maximum(dist - t_near, 0.0)
        step = length / n_samples
        t = t_near[:, None] + step[:, None] * (np.arange(n_samples) + 0.5)[None]
        samples = center + t[..., None] * dirs[:, None, :]
        sig = np.asarray(sigma_fn(samples.reshape(-1, 3))).reshape(len(p), n_samples)
        out[s:s + chunk] = np.exp(-(sig.sum(axis=1) * step))
    return out


def distance_weights(points: np.ndarray, centers: np.ndarray, epsilon: float) -> np.ndarray:
    """``W_k(v, X) = 1 / (|c_v - X|^2 + eps)`` for every view/point, shape (V, n)."""
    d2 = ((points[None, :, :] - centers[:, None, :]) ** 2).sum(axis=-1)
    return 1.0 / (d2 + epsilon)


def fusion_weight(points, centers, sigma_fns, epsilon: float = 1e-8, n_samples: int = 32) -> np.ndarray:
    """Per-view fusion weights, shape (V, n): max-normalised distance factor x transmittance."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    W = distance_weights(points, centers, epsilon)
    W = W / W.max(axis=0, keepdims=True)
    T = np.stack([transmittance(points, c, fn, n_samples) for c, fn in zip(centers, sigma_fns)])
    return W * T


def fuse_views(colors, sigmas, weights):
    """Weighted sum of per-view predictions.

    ``colors (V, n, 3)``, ``sigmas (V, n)``, ``weights (V, n)``; the weights are
    not renormalised.
    """
    colors = np.asarray(colors, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    return (weights[..., None] * colors).sum(axis=0), (weights * sigmas).sum(axis=0)


@dataclass
class LatticePointCloud:
    positions: np.ndarray
    sigma: np.ndarray
    rgb: np.ndarray

    def __len__(self):
        return len(self.positions)


def lattice_sigma_lookup(points: np.ndarray, resolution: int, sigma: np.ndarray, k: int,
                         radius: float, epsilon: float):
    """IDW density lookup over lattice values, as used along radiance lines.

    Samples with no positive-density lattice point within ``radius`` get exactly
    0 without a neighbour query; a dilated occupancy grid finds them.
    """
    index = build_index(points, resolution)
    r = resolution
    h = 2.0 / (r - 1)
    occupied = (sigma > 0).reshape(r, r, r)          # [k, j, i]: x varies fastest
    reach = int(np.ceil(radius / h + 0.5))
    near = ndimage.maximum_filter(occupied, size=2 * reach + 1, mode="constant", cval=False)

    def lookup(q):
        q = np.asarray(q, dtype=np.float64)
        out = np.zeros(len(q))
        n = np.clip(np.rint((q + 1.0) / h), 0, r - 1).astype(np.int64)
        inside = np.abs(q - (n * h - 1.0)).max(axis=1) <= 0.5 * h + 1e-12
        todo = np.flatnonzero(~inside | near[n[:, 2], n[:, 1], n[:, 0]])
        if len(todo):
            idx, dist = index.query(q[todo], k, radius)
            s = np.where(idx >= 0, sigma[np.maximum(idx, 0)], 0.0)
            with ad.no_grad():
                sr, _ = idw_aggregate(s, np.zeros(s.shape + (3,)), dist, epsilon)
            out[todo] = sr.data
        return out

    return lookup


def fused_field(model: FieldModel, views, resolution: int, cfg: TrainConfig):
    """Fused colour/density at every point of an ``r^3`` lattice."""
    lattice = generate_lattice(resolution)
    eps = cfg.loss.epsilon
    radius = cfg.neighbor_radius(resolution)
    colors, sigmas, lookups, centers = [], [], [], []
    for view in views:
        with ad.no_grad():
            ctx = make_context(model, view)
        rgb, sig = per_view_field(lattice, ctx, model)
        colors.append(rgb)
        sigmas.append(sig)
        centers.append(view.pose.center)
        lookups.append(lattice_sigma_lookup(lattice, resolution, sig, cfg.k, radius, eps))
    w = fusion_weight(lattice, np.array(centers), lookups, eps, cfg.transmittance_samples)
    c_fused, s_fused = fuse_views(np.array(colors), np.array(sigmas), w)
    return lattice, c_fused, s_fused


def extract_cloud(model: FieldModel, views, resolution: int, theta: float, cfg: TrainConfig,
                  return_field: bool = False):
    """Keep lattice points whose fused density exceeds ``theta``."""
    if not views:
        raise ValueError("extraction needs at least one view")
    if theta < 0:
        raise ValueError("theta must be non-negative")
    lattice, c_fused, s_fused = fused_field(model, views, resolution, cfg)
    keep = s_fused > theta
    cloud = LatticePointCloud(lattice[keep], s_fused[keep], np.clip(c_fused[keep], 0.0, 1.0))
    if not len(cloud):
        log.warning("no lattice point exceeds theta=%g; extracted cloud is empty", theta)
    if return_field:
        return cloud, (lattice, c_fused, s_fused)
    return cloud


# ---------------------------------------------------------------------------
# novel-view rendering


def nearest_sources(views, target_center, n: int):
    """The ``n`` views whose camera centres are closest to ``target_center`` (stable order)."""
    d = [float(np.linalg.norm(v.pose.center - target_center)) for v in views]
    order = np.argsort(d, kind="stable")[:n]
    return [views[i] for i in order]


def render_view(model: FieldModel, sources, pose: CameraPose, dims, cfg: TrainConfig,
                resolution: int | None = None, n_samples: int | None = None,
                chunk: int = 1024) -> np.ndarray:
    """Render ``(H, W, 3)`` at ``pose`` as the view-weighted mix of per-source renders."""
    resolution = resolution or cfg.fine_resolution
    n_samples = n_samples or cfg.samples_fine
    H, W = dims
    lattice = generate_lattice(resolution)
    index = build_index(lattice, resolution)
    radius = cfg.neighbor_radius(resolution)
    eps = cfg.loss.epsilon
    weights = view_weight([s.pose.center for s in sources], pose.center, eps)
    origins, dirs, t_near, t_far, hit = rays_for_pixels(pose, pixel_centers(H, W))
    out = np.zeros((H * W, 3))
    with ad.no_grad():
        contexts = [make_context(model, s) for s in sources]
        for s in range(0, H * W, chunk):
            sl = slice(s, s + chunk)
            nb = gather_neighborhoods(index, origins[sl], dirs[sl], t_near[sl], t_far[sl], hit[sl],
                                      n_samples, cfg.k, radius)
            pts = lattice[nb.unique]
            for ctx, w in zip(contexts, weights):
                if len(pts):
                    sig, rgb = evaluate_field(model, ctx, pts)
                else:
                    sig, rgb = ad.Tensor(np.zeros(0)), ad.Tensor(np.zeros((0, 3)))
                img, _ = render_neighborhoods(sig, rgb, nb, eps, cfg.background)
                out[sl] += w * img.data
    return out.reshape(H, W, 3)


# ---------------------------------------------------------------------------
# PLY


def write_ply(path, cloud: LatticePointCloud, confidence: bool = False, comment: str | None = None) -> None:
    """Binary little-endian PLY with float32 xyz, uint8 rgb and optional float confidence."""
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
              ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if confidence:
        fields.append(("confidence", "<f4"))
    arr = np.empty(len(cloud), dtype=fields)
    for i, name in enumerate("xyz"):
        arr[name] = cloud.positions[:, i]
    rgb8 = np.clip(np.round(cloud.rgb * 255.0), 0, 255).astype(np.uint8)
    for i, name in enumerate(("red", "green", "blue")):
        arr[name] = rgb8[:, i]
    if confidence:
        arr["confidence"] = cloud.sigma
    header = ["ply", "format binary_little_endian 1.0"]
    if comment:
        header += [f"comment {line}" for line in comment.splitlines()]
    header.append(f"element vertex {len(cloud)}")
    header += ["property float x", "property float y", "property float z",
               "property uchar red", "property uchar green", "property uchar blue"]
    if confidence:
        header.append("property float confidence")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(arr.tobytes())


_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "uchar": "u1", "uint8": "u1",
              "int": "<i4", "int32": "<i4", "uint": "<u4", "short": "<i2", "ushort": "<u2", "char": "i1"}


def read_ply(path):
    """Read a binary little-endian vertex-only PLY; returns ``(structured array, comments)``."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise ValueError(f"{path}: only binary_little_endian PLY is supported")
    fields, count, comments = [], None, []
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "comment":
            comments.append(line[len("comment "):])
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise ValueError(f"{path}: unsupported element {parts[1]!r}")
            count = int(parts[2])
        elif parts[0] == "property":
            fields.append((parts[2], _PLY_TYPES[parts[1]]))
    arr = np.frombuffer(data, dtype=np.dtype(fields), count=count, offset=end + len(b"end_header\n"))
    return arr, comments


def cloud_from_ply(path) -> LatticePointCloud:
    arr, _ = read_ply(path)
    pos = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
    rgb = np.stack([arr["red"], arr["green"], arr["blue"]], axis=1).astype(np.float64) / 255.0
    sigma = arr["confidence"].astype(np.float64) if "confidence" in arr.dtype.names else np.zeros(len(arr))
    return LatticePointCloud(pos, sigma, rgb)
