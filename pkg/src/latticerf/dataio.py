"""Synthetic SDF scenes, reference ray casting and the on-disk dataset format.

Layout::

    out_dir/manifest.json
    out_dir/scene_000/poses.json
    out_dir/scene_000/images/view_000.png   (8-bit RGB)
    out_dir/scene_000/masks/view_000.png    (8-bit gray)
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .config import ConfigError
from .geometry import CONVENTION, CameraPose, Intrinsics, look_at, pixel_centers, rays_for_pixels

log = logging.getLogger(__name__)

LIGHT_DIR = np.array([0.3, 0.8, 0.5]) / np.linalg.norm([0.3, 0.8, 0.5])
AMBIENT = 0.35
MANIFEST_VERSION = 1


class DatasetError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# scenes


@dataclass
class Primitive:
    kind: str                # sphere | box | torus
    center: tuple
    size: tuple              # sphere (r,), box half-extents (bx, by, bz), torus (R, r)
    albedo: tuple

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = p - np.asarray(self.center)
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        if self.kind == "box":
            d = np.abs(q) - np.asarray(self.size)
            return np.linalg.norm(np.maximum(d, 0.0), axis=-1) + np.minimum(d.max(axis=-1), 0.0)
        if self.kind == "torus":
            ring = np.linalg.norm(q[..., [0, 2]], axis=-1) - self.size[0]
            return np.hypot(ring, q[..., 1]) - self.size[1]
        raise ConfigError(f"unknown primitive {self.kind!r}")

    def extent(self) -> float:
        """Radius of a bounding ball about the primitive's center."""
        if self.kind == "sphere":
            return self.size[0]
        if self.kind == "box":
            return float(np.linalg.norm(self.size))
        return self.size[0] + self.size[1]

    def to_json(self) -> dict:
        return {"kind": self.kind, "center": list(self.center), "size": list(self.size),
                "albedo": list(self.albedo)}


@dataclass
class OrbitSpec:
    radius: float = 3.0
    n_views: int = 8
    n_holdout: int = 0
    sampling: str = "fibonacci"   # fibonacci | random


@dataclass
class SyntheticScene:
    primitives: list
    orbit: OrbitSpec = field(default_factory=OrbitSpec)

    def __post_init__(self):
        if not 1 <= len(self.primitives) <= 4:
            raise ConfigError("a scene holds between 1 and 4 primitives")
        for prim in self.primitives:
            c = np.asarray(prim.center)
            if (np.abs(c) + prim.extent() >= 0.8).any() and not self._tight_inside(prim):
                raise ConfigError(f"primitive {prim.kind} at {prim.center} leaves [-0.8, 0.8]^3")

    @staticmethod
    def _tight_inside(prim: Primitive) -> bool:
        c = np.asarray(prim.center)
        if prim.kind == "box":
            return bool((np.abs(c) + np.asarray(prim.size) < 0.8).all())
        if prim.kind == "torus":
            R, r = prim.size
            half = np.array([R + r, r, R + r])
            return bool((np.abs(c) + half < 0.8).all())
        return False

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.min([prim.sdf(p) for prim in self.primitives], axis=0)

    def albedo(self, p: np.ndarray) -> np.ndarray:
        d = np.stack([prim.sdf(p) for prim in self.primitives])
        pick = np.argmin(d, axis=0)
        table = np.array([prim.albedo for prim in self.primitives], dtype=np.float64)
        return table[pick]

    def normal(self, p: np.ndarray, h: float = 1e-5) -> np.ndarray:
        n = np.empty_like(p)
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            n[..., a] = self.sdf(p + e) - self.sdf(p - e)
        return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)

    def to_json(self) -> dict:
        return {"primitives": [p.to_json() for p in self.primitives]}

    @classmethod
    def from_json(cls, data: dict) -> "SyntheticScene":
        prims = [Primitive(p["kind"], tuple(p["center"]), tuple(p["size"]), tuple(p["albedo"]))
                 for p in data["primitives"]]
        return cls(prims)


def sphere_scene(radius: float = 0.6, albedo=(0.9, 0.45, 0.2), orbit: OrbitSpec | None = None):
    return SyntheticScene([Primitive("sphere", (0.0, 0.0, 0.0), (radius,), tuple(albedo))],
                          orbit or OrbitSpec())


def random_scene(rng: np.random.Generator, orbit: OrbitSpec | None = None) -> SyntheticScene:
    n = int(rng.integers(1, 5))
    prims = []
    for _ in range(n):
        kind = ["sphere", "box", "torus"][int(rng.integers(3))]
        albedo = tuple(float(x) for x in rng.uniform(0.2, 0.95, 3))
        if kind == "sphere":
            size = (float(rng.uniform(0.15, 0.35)),)
            reach = size[0]
        elif kind == "box":
            size = tuple(float(x) for x in rng.uniform(0.1, 0.25, 3))
            reach = max(size)
        else:
            size = (float(rng.uniform(0.15, 0.3)), float(rng.uniform(0.05, 0.1)))
            reach = size[0] + size[1]
        lim = 0.78 - reach
        center = tuple(float(x) for x in rng.uniform(-lim, lim, 3) * 0.6)
        prims.append(Primitive(kind, center, size, albedo))
    return SyntheticScene(prims, orbit or OrbitSpec())


def default_intrinsics(dims) -> Intrinsics:
    H, W = dims
    f = 0.65 * W
    return Intrinsics(f, f, W / 2.0, H / 2.0)


def orbit_poses(orbit: OrbitSpec, dims, rng: np.random.Generator, n: int | None = None):
    """Cameras on a sphere of radius ``orbit.radius`` looking at the origin.

    Longitude spans [0, 2pi); latitude is the polar angle from +y in [0, pi).
    """
    n = orbit.n_views if n is None else n
    if orbit.sampling == "fibonacci":
        phase = rng.uniform(0.0, 2.0 * math.pi)
        i = np.arange(n) + 0.5
        lat = np.arccos(1.0 - 2.0 * i / n)
        lon = np.mod(i * math.pi * (3.0 - math.sqrt(5.0)) + phase, 2.0 * math.pi)
    elif orbit.sampling == "random":
        lon = rng.uniform(0.0, 2.0 * math.pi, n)
        lat = np.arccos(rng.uniform(-1.0, 1.0, n))
    else:
        raise ConfigError(f"unknown orbit sampling {orbit.sampling!r}")
    intr = default_intrinsics(dims)
    centers = orbit.radius * np.stack([np.sin(lat) * np.cos(lon), np.cos(lat), np.sin(lat) * np.sin(lon)], 1)
    return [look_at(c, intrinsics=intr) for c in centers]


def raycast_reference(scene: SyntheticScene, pose: CameraPose, dims, max_steps: int = 256,
                      hit_eps: float = 1e-6):
    """Sphere-trace the scene SDF; returns ``(image, mask, depth)``.

    ``depth`` is the ray distance to the hit (``inf`` for misses), ``mask`` is
    exactly ``depth < inf`` and the image is flat-albedo Lambertian shading
    against a black background.
    """
    H, W = dims
    origins, dirs, _, t_far, hit_box = rays_for_pixels(pose, pixel_centers(H, W))
    t = np.zeros(len(dirs))
    active = np.ones(len(dirs), dtype=bool)
    done = np.zeros(len(dirs), dtype=bool)
    limit = np.where(hit_box, t_far, 0.0) + 1e-3
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        p = origins[idx] + t[idx, None] * dirs[idx]
        d = scene.sdf(p)
        inside_start = (t[idx] == 0.0) & (d < 0.0)
        converged = (np.abs(d) < hit_eps) | inside_start
        done[idx[converged]] = True
        active[idx[converged]] = False
        step = np.where(converged, 0.0, np.maximum(d, 0.0))
        t[idx] += step
        gone = t[idx] > limit[idx]
        active[idx[gone]] = False
    depth = np.where(done, t, np.inf)
    mask = np.isfinite(depth)
    image = np.zeros((H * W, 3))
    if mask.any():
        p = origins[mask] + depth[mask, None] * dirs[mask]
        shade = AMBIENT + (1.0 - AMBIENT) * np.clip(scene.normal(p) @ LIGHT_DIR, 0.0, 1.0)
        inside = depth[mask] == 0.0
        shade = np.where(inside, 1.0, shade)
        image[mask] = scene.albedo(p) * shade[:, None]
    return image.reshape(H, W, 3), mask.reshape(H, W), depth.reshape(H, W)


def sample_surface(scene: SyntheticScene, n: int, rng: np.random.Generator) -> np.ndarray:
    """Points on the zero level set (analytic for a lone sphere, projected otherwise)."""
    prims = scene.primitives
    if len(prims) == 1 and prims[0].kind == "sphere":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return np.asarray(prims[0].center) + prims[0].size[0] * v
    pts = rng.uniform(-0.85, 0.85, size=(max(20 * n, 20000), 3))
    d = scene.sdf(pts)
    near = pts[np.abs(d) < 0.05]
    for _ in range(8):
        near = near - scene.sdf(near)[:, None] * scene.normal(near)
    near = near[np.abs(scene.sdf(near)) < 1e-6]
    if len(near) < n:
        raise ConfigError("could not sample enough surface points")
    return near[rng.choice(len(near), n, replace=False)]


# ---------------------------------------------------------------------------
# in-memory dataset


@dataclass(eq=False)
class CameraView:
    image: np.ndarray            # (H, W, 3) in [0, 1]
    pose: CameraPose
    mask: np.ndarray | None = None
    name: str = ""
    holdout: bool = False

    @property
    def dims(self):
        return self.image.shape[:2]


@dataclass
class Scene:
    name: str
    split: str
    views: list
    reference: SyntheticScene | None = None

    @property
    def train_views(self):
        return [v for v in self.views if not v.holdout]

    @property
    def holdout_views(self):
        return [v for v in self.views if v.holdout]


@dataclass
class Dataset:
    scenes: list
    root: Path | None = None
    seed: int | None = None

    def split(self, name: str):
        return [s for s in self.scenes if s.split == name]


def synthetic_views(scene: SyntheticScene, dims, n: int, rng: np.random.Generator,
                    prefix: str = "view") -> list:
    """Render ``n`` orbit views of ``scene`` in memory (images, exact masks, poses)."""
    views = []
    for i, pose in enumerate(orbit_poses(scene.orbit, dims, rng, n)):
        image, mask, _ = raycast_reference(scene, pose, dims)
        views.append(CameraView(image, pose, mask.astype(np.float64), f"{prefix}_{i:03d}"))
    return views


def split_counts(n: int) -> tuple[int, int, int]:
    n_train = int(round(0.7 * n))
    n_val = int(round(0.2 * n))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


# ---------------------------------------------------------------------------
# disk format


def _pose_json(pose: CameraPose, dims) -> dict:
    K = pose.intrinsics
    return {"rotation": [float(x) for x in pose.rotation.ravel()],
            "translation": [float(x) for x in pose.translation],
            "intrinsics": {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy},
            "height": int(dims[0]), "width": int(dims[1])}


def _pose_from_json(d: dict, where: str) -> CameraPose:
    try:
        K = d["intrinsics"]
        pose = CameraPose(np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
                          np.array(d["translation"], dtype=np.float64),
                          Intrinsics(float(K["fx"]), float(K["fy"]), float(K["cx"]), float(K["cy"])))
    except (KeyError, ValueError, TypeError) as exc:
        raise DatasetError(f"{where}: malformed pose entry ({exc})") from exc
    try:
        pose.check(1e-9)
    except ConfigError as exc:
        raise DatasetError(f"{where}: {exc}") from exc
    return pose


def save_png_rgb(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_png_gray(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def read_png(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            return np.asarray(im.convert(mode), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


@dataclass
class DatasetSpec:
    n_scenes: int = 1
    n_views: int = 8
    n_holdout: int = 2
    dims: tuple = (48, 48)
    kind: str = "sphere"          # sphere | random
    sphere_radius: float = 0.6
    orbit_radius: float = 3.0
    sampling: str = "fibonacci"


def generate_dataset(spec: DatasetSpec, out_dir, seed: int = 0) -> dict:
    """Render every scene/view and write images, masks, poses and the manifest."""
    out = Path(out_dir)
    H, W = spec.dims
    if H % 4 or W % 4:
        raise ConfigError("image dims must be divisible by 4")
    rng = np.random.default_rng(seed)
    n_train, n_val, _ = split_counts(spec.n_scenes)
    order = rng.permutation(spec.n_scenes)
    split_of = {}
    for rank, s in enumerate(order):
        split_of[int(s)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    orbit = OrbitSpec(spec.orbit_radius, spec.n_views, spec.n_holdout, spec.sampling)
    scenes_meta = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for s in range(spec.n_scenes):
            if spec.kind == "sphere":
                scene = sphere_scene(spec.sphere_radius, orbit=orbit)
            else:
                scene = random_scene(rng, orbit)
            name = f"scene_{s:03d}"
            sdir = out / name
            (sdir / "images").mkdir(parents=True, exist_ok=True)
            (sdir / "masks").mkdir(parents=True, exist_ok=True)
            poses = orbit_poses(orbit, spec.dims, rng)
            if spec.n_holdout:
                poses += orbit_poses(orbit, spec.dims, rng, n=spec.n_holdout)
            views_meta, poses_meta = [], []
            for v, pose in enumerate(poses):
                image, mask, _ = raycast_reference(scene, pose, spec.dims)
                img_rel, mask_rel = f"images/view_{v:03d}.png", f"masks/view_{v:03d}.png"
                save_png_rgb(sdir / img_rel, image)
                save_png_gray(sdir / mask_rel, mask.astype(np.float64))
                views_meta.append({"image": img_rel, "mask": mask_rel, "holdout": v >= spec.n_views})
                poses_meta.append(_pose_json(pose, spec.dims))
            (sdir / "poses.json").write_text(json.dumps(
                {"convention": CONVENTION, "views": poses_meta}, indent=1))
            scenes_meta.append({"name": name, "path": name, "split": split_of[s], "views": views_meta,
                                "reference": scene.to_json()})
        manifest = {"version": MANIFEST_VERSION, "convention": CONVENTION, "seed": seed,
                    "dims": [H, W], "scenes": scenes_meta}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    except OSError as exc:
        raise DatasetError(f"failed writing dataset under {out}: {exc}") from exc
    return manifest


def load_dataset(root, require_masks: bool = True) -> Dataset:
    """Load and validate a dataset directory written by :func:`generate_dataset`."""
    root = Path(root)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"missing manifest {mpath}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {mpath}: {exc}") from exc
    if manifest.get("convention") != CONVENTION:
        raise DatasetError(f"{mpath}: convention {manifest.get('convention')!r} != {CONVENTION!r}")
    if "scenes" not in manifest:
        raise DatasetError(f"{mpath}: no 'scenes' entry")
    scenes = []
    for entry in manifest["scenes"]:
        sdir = root / entry["path"]
        ppath = sdir / "poses.json"
        try:
            poses_doc = json.loads(ppath.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read poses {ppath}: {exc}") from exc
        if poses_doc.get("convention") != CONVENTION:
            raise DatasetError(f"{ppath}: convention {poses_doc.get('convention')!r} != {CONVENTION!r}")
        pose_list = poses_doc.get("views", [])
        if len(pose_list) != len(entry["views"]):
            raise DatasetError(f"{ppath}: {len(pose_list)} poses for {len(entry['views'])} views")
        views = []
        for i, (vmeta, pmeta) in enumerate(zip(entry["views"], pose_list)):
            pose = _pose_from_json(pmeta, f"{ppath} view {i}")
            image = read_png(sdir / vmeta["image"], "RGB")
            if image.shape[:2] != (pmeta["height"], pmeta["width"]):
                raise DatasetError(f"{sdir / vmeta['image']}: size {image.shape[:2]} disagrees with pose")
            mask = None
            if vmeta.get("mask"):
                mask = read_png(sdir / vmeta["mask"], "L")
                if mask.shape != image.shape[:2]:
                    raise DatasetError(f"{sdir / vmeta['mask']}: mask size differs from image")
            elif require_masks:
                log.warning("scene %s view %d has no mask; geometric loss disabled for it", entry["name"], i)
            views.append(CameraView(image, pose, mask, name=f"{entry['name']}/{i:03d}",
                                    holdout=bool(vmeta.get("holdout", False))))
        ref = SyntheticScene.from_json(entry["reference"]) if entry.get("reference") else None
        scenes.append(Scene(entry["name"], entry.get("split", "train"), views, ref))
    return Dataset(scenes, root, manifest.get("seed"))
