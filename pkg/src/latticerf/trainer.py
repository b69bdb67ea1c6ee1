"""Coarse-to-fine optimisation with Adam, view scheduling, loss logs and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import TrainConfig, config_hash, from_dict, to_dict
from .fusion import field_from_constants, make_context, point_constants
from .geometry import generate_lattice, rays_for_pixels
from .losses import color_loss, density_regularization, geometric_loss, total_loss, view_weight
from .nnet import FieldModel
from .renderer import gather_neighborhoods, render_neighborhoods, splat_footprint, splat_silhouette
from .spatial import build_index

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step", "stage", "L_geom", "L_reg", "L_color", "L_total")


class SchedulingError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, report_path=None):
        super().__init__(message)
        self.report_path = report_path


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamMoments:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamMoments":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, moments: AdamMoments, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_moments)``.

    A step with any non-finite gradient is rejected: inputs come back unchanged
    and a warning names the offending tensors.
    """
    if len(params) != len(grads) or len(params) != len(moments.m):
        raise ValueError("params, grads and moments must have equal length")
    bad = [i for i, g in enumerate(grads) if not np.isfinite(g).all()]
    if bad:
        log.warning("rejecting Adam step %d: non-finite gradient in parameter(s) %s", moments.t + 1, bad)
        return params, moments
    b1, b2 = betas
    t = moments.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, moments.m, moments.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamMoments(new_m, new_v, t)


def clip_by_global_norm(grads, max_norm: float):
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return grads, norm


class DivergenceMonitor:
    """Flags a run whose loss stays above ``factor`` x its first value for ``patience`` steps."""

    def __init__(self, initial: float | None = None, factor: float = 10.0, patience: int = 100):
        self.initial = initial
        self.factor = factor
        self.patience = patience
        self.streak = 0

    def update(self, loss: float) -> bool:
        if self.initial is None:
            self.initial = loss
        self.streak = self.streak + 1 if loss > self.factor * self.initial else 0
        return self.streak >= self.patience


# ---------------------------------------------------------------------------
# scheduling


def schedule_views(scene, n_views: int, rng: np.random.Generator):
    """Draw ``n_views`` source views and one disjoint target from the scene's training views."""
    views = scene.train_views if hasattr(scene, "train_views") else list(scene)
    if n_views < 1:
        raise SchedulingError("need at least one source view")
    if len(views) <= n_views:
        raise SchedulingError(f"scene has {len(views)} training views; {n_views} sources plus a "
                              f"target need at least {n_views + 1}")
    perm = rng.permutation(len(views))
    return [views[i] for i in perm[:n_views]], views[perm[n_views]]


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    stage: str
    step: int
    params: list
    moments: AdamMoments
    config: TrainConfig
    rng_state: dict
    initial_loss: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def model(self) -> FieldModel:
        m = FieldModel(self.config.encoding, self.config.model, self.config.seed)
        m.load_state(self.params)
        return m


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = {"version": CHECKPOINT_VERSION, "stage": ckpt.stage, "step": ckpt.step,
            "adam_t": ckpt.moments.t, "config": to_dict(ckpt.config), "config_hash": ckpt.config_hash,
            "rng_state": ckpt.rng_state, "initial_loss": ckpt.initial_loss, "extra": ckpt.extra}
    arrays = {"meta": np.array(json.dumps(meta))}
    for i, (p, m, v) in enumerate(zip(ckpt.params, ckpt.moments.m, ckpt.moments.v)):
        arrays[f"param_{i:03d}"] = p
        arrays[f"adam_m_{i:03d}"] = m
        arrays[f"adam_v_{i:03d}"] = v
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def load_checkpoint(path, expect: TrainConfig | None = None) -> Checkpoint:
    """Load a checkpoint; with ``expect`` given, its config hash must match."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        n = len([k for k in z.files if k.startswith("param_")])
        params = [z[f"param_{i:03d}"] for i in range(n)]
        m = [z[f"adam_m_{i:03d}"] for i in range(n)]
        v = [z[f"adam_v_{i:03d}"] for i in range(n)]
    cfg = from_dict(meta["config"])
    if config_hash(cfg) != meta["config_hash"]:
        raise CheckpointError(f"{path}: stored config does not match its recorded hash")
    if expect is not None and config_hash(expect) != meta["config_hash"]:
        raise CheckpointError(f"{path}: config hash {meta['config_hash']} differs from the requested "
                              f"config {config_hash(expect)}")
    return Checkpoint(meta["stage"], int(meta["step"]), params, AdamMoments(m, v, int(meta["adam_t"])),
                      cfg, meta["rng_state"], meta.get("initial_loss"), meta.get("extra", {}))


# ---------------------------------------------------------------------------
# loss log


class LossLog:
    """Append-only CSV of per-step loss components."""

    def __init__(self, path, resume: bool = False):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path is None:
            return
        if resume and self.path.exists():
            with open(self.path, newline="") as fh:
                self.rows = [dict(r) for r in csv.DictReader(fh)]
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)

    def truncate_after(self, step: int) -> None:
        """Drop rows at or beyond ``step`` (resuming from an earlier checkpoint)."""
        self.rows = [r for r in self.rows if int(r["step"]) < step]
        if self.path is not None:
            with open(self.path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(LOG_COLUMNS)
                for r in self.rows:
                    w.writerow([r[c] for c in LOG_COLUMNS])

    def append(self, step: int, stage: str, geom: float, reg: float, color: float, total: float) -> None:
        row = {"step": str(step), "stage": stage, "L_geom": repr(geom), "L_reg": repr(reg),
               "L_color": repr(color), "L_total": repr(total)}
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[c] for c in LOG_COLUMNS])

    def column(self, name: str) -> np.ndarray:
        return np.array([float(r[name]) for r in self.rows])


def smooth(values, window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    values = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def read_loss_log(path) -> LossLog:
    return LossLog(path, resume=True)


# ---------------------------------------------------------------------------
# per-scene constants


class _ViewCache:
    """Lattice inputs and silhouette footprints that never change during training."""

    def __init__(self, view, lattice, cfg: TrainConfig, feature_hw):
        self.view = view
        self.const = point_constants(lattice, view.pose, view.dims, feature_hw, cfg.encoding)
        self.footprint = splat_footprint(lattice, view.pose, view.dims, cfg.splat_sigma_px)
        self.mask = None if view.mask is None else np.asarray(view.mask, dtype=np.float64)


class _Problem:
    def __init__(self, dataset, cfg: TrainConfig, model: FieldModel):
        self.cfg = cfg
        self.scenes = [s for s in dataset.scenes if s.split == "train"] or list(dataset.scenes)
        self.coarse = generate_lattice(cfg.coarse_resolution)
        self.fine = generate_lattice(cfg.fine_resolution)
        self._fine_index = None
        self._cache: dict[int, _ViewCache] = {}
        self.model = model
        for scene in self.scenes:
            if len(scene.train_views) <= cfg.views_per_scene_per_epoch:
                raise SchedulingError(f"scene {scene.name!r} has {len(scene.train_views)} training views; "
                                      f"{cfg.views_per_scene_per_epoch} sources plus a target are needed")
        self.masks_ok = all(v.mask is not None for s in self.scenes for v in s.train_views)
        if not self.masks_ok:
            log.warning("some training views lack masks; the geometric loss is disabled")

    @property
    def fine_index(self):
        if self._fine_index is None:
            self._fine_index = build_index(self.fine, self.cfg.fine_resolution)
        return self._fine_index

    def view(self, v) -> _ViewCache:
        c = self._cache.get(id(v))
        if c is None:
            H, W = v.dims
            c = self._cache[id(v)] = _ViewCache(v, self.coarse, self.cfg, (H // 4, W // 4))
        return c


def _step_losses(prob: _Problem, sources, target, stage: str, rng: np.random.Generator):
    cfg = prob.cfg
    model = prob.model
    supervised = [prob.view(v) for v in sources + [target]]
    contexts = [make_context(model, s) for s in sources]
    geom = ad.Tensor(0.0)
    reg = ad.Tensor(0.0)
    n = len(sources)
    for src, ctx in zip(sources, contexts):
        sigma, _ = field_from_constants(model, ctx, prob.view(src).const)
        if prob.masks_ok:
            sils = [splat_silhouette(sigma, vc.footprint) for vc in supervised]
            geom = geom + geometric_loss(sils, [vc.mask for vc in supervised]) * (1.0 / n)
        reg = reg + density_regularization(sigma, cfg.loss) * (1.0 / n)
    color = ad.Tensor(0.0)
    if stage == "fine":
        H, W = target.dims
        m = min(cfg.rays_per_image, H * W)
        pix = np.sort(rng.choice(H * W, size=m, replace=False))
        uv = np.stack([pix % W + 0.5, pix // W + 0.5], axis=1)
        origins, dirs, t_near, t_far, hit = rays_for_pixels(target.pose, uv)
        nb = gather_neighborhoods(prob.fine_index, origins, dirs, t_near, t_far, hit, cfg.samples_fine,
                                  cfg.k, cfg.neighbor_radius(cfg.fine_resolution), stratified=True, rng=rng)
        pts = prob.fine[nb.unique]
        preds = []
        for src, ctx in zip(sources, contexts):
            const = point_constants(pts, src.pose, src.dims, ctx.features.shape[:2], cfg.encoding)
            sig_u, rgb_u = field_from_constants(model, ctx, const)
            rgb, _ = render_neighborhoods(sig_u, rgb_u, nb, cfg.loss.epsilon, cfg.background)
            preds.append(rgb)
        weights = view_weight([s.pose.center for s in sources], target.pose.center, cfg.loss.epsilon)
        color = color_loss(preds, target.image.reshape(-1, 3)[pix], weights)
    total = total_loss(geom + reg, color, cfg.loss.lambda_color if stage == "fine" else 0.0)
    return geom, reg, color, total


# ---------------------------------------------------------------------------
# loops


def initial_checkpoint(cfg: TrainConfig) -> Checkpoint:
    """Untrained model at step 0 with a fresh optimiser and training RNG."""
    model = FieldModel(cfg.encoding, cfg.model, cfg.seed)
    params = model.state()
    rng = np.random.default_rng([cfg.seed, 1])
    return Checkpoint("init", 0, params, AdamMoments.zeros_like(params), cfg, rng.bit_generator.state)


def _run_stage(dataset, cfg: TrainConfig, stage: str, start: Checkpoint, end_step: int,
               out_dir=None, log_path=None, checkpoint_every: int = 0, callback=None) -> Checkpoint:
    model = start.model()
    prob = _Problem(dataset, cfg, model)
    rng = np.random.default_rng()
    rng.bit_generator.state = start.rng_state
    moments = start.moments
    params = [p.data for p in model.parameters()]
    out_dir = Path(out_dir) if out_dir else None
    if log_path is None and out_dir is not None:
        log_path = out_dir / "loss_log.csv"
    loss_log = LossLog(log_path, resume=start.step > 0)
    loss_log.truncate_after(start.step)
    monitor = DivergenceMonitor(start.initial_loss if start.stage == stage else None)
    if start.stage == stage:
        monitor.streak = int(start.extra.get("divergence_streak", 0))
    step = start.step

    def snapshot(step_):
        return Checkpoint(stage, step_, [p.data.copy() for p in model.parameters()], moments, cfg,
                          rng.bit_generator.state, monitor.initial, {"divergence_streak": monitor.streak})

    while step < end_step:
        scene = prob.scenes[int(rng.integers(len(prob.scenes)))] if len(prob.scenes) > 1 else prob.scenes[0]
        sources, target = schedule_views(scene, cfg.views_per_scene_per_epoch, rng)
        model.zero_grad()
        geom, reg, color, total = _step_losses(prob, sources, target, stage, rng)
        L = float(total.data)
        if not np.isfinite(L):
            raise ad.NonFiniteError(f"non-finite {stage} loss at step {step}")
        ad.backward(total)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in model.parameters()]
        grads, _ = clip_by_global_norm(grads, cfg.grad_clip)
        params = [p.data for p in model.parameters()]
        params, moments = adam_step(params, grads, moments, cfg.lr)
        for p, new in zip(model.parameters(), params):
            p.data = new
        if step % cfg.log_every == 0 or step == end_step - 1:
            loss_log.append(step, stage, float(geom.data), float(reg.data), float(color.data), L)
        if monitor.update(L):
            initial = monitor.initial
            report = {"stage": stage, "step": step, "initial_loss": initial, "loss": L,
                      "config_hash": config_hash(cfg)}
            path = None
            if out_dir is not None:
                out_dir.mkdir(parents=True, exist_ok=True)
                path = out_dir / "divergence_report.json"
                path.write_text(json.dumps(report, indent=1))
            raise TrainingDiverged(f"{stage} loss above 10x its initial value for 100 steps "
                                   f"(step {step}, loss {L:.4g}, initial {initial:.4g})", path)
        step += 1
        if callback is not None:
            callback(step, snapshot)
        if out_dir is not None and checkpoint_every and step % checkpoint_every == 0 and step < end_step:
            save_checkpoint(out_dir / f"{stage}_step{step:06d}.npz", snapshot(step))
    ckpt = snapshot(step)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / f"{stage}.npz", ckpt)
    return ckpt


def train_coarse(dataset, cfg: TrainConfig, out_dir=None, resume: Checkpoint | None = None,
                 log_path=None, checkpoint_every: int = 0, callback=None) -> Checkpoint:
    """Geometry-only stage on the coarse lattice."""
    start = resume if resume is not None else initial_checkpoint(cfg)
    if start.stage not in ("init", "coarse"):
        raise CheckpointError(f"cannot resume the coarse stage from a {start.stage!r} checkpoint")
    _check_config(start, cfg)
    return _run_stage(dataset, cfg, "coarse", start, cfg.coarse_steps, out_dir, log_path,
                      checkpoint_every, callback)


def train_fine(dataset, cfg: TrainConfig, coarse_ckpt: Checkpoint, out_dir=None, log_path=None,
               checkpoint_every: int = 0, callback=None) -> Checkpoint:
    """Colour/detail stage; starts from a finished coarse checkpoint (or resumes a fine one)."""
    if coarse_ckpt is None or coarse_ckpt.stage not in ("coarse", "fine"):
        raise CheckpointError("the fine stage needs a coarse checkpoint")
    if coarse_ckpt.stage == "coarse" and coarse_ckpt.step != cfg.coarse_steps:
        raise CheckpointError(f"coarse checkpoint is at step {coarse_ckpt.step}, "
                              f"expected the finished stage at {cfg.coarse_steps}")
    _check_config(coarse_ckpt, cfg)
    return _run_stage(dataset, cfg, "fine", coarse_ckpt, cfg.coarse_steps + cfg.fine_steps, out_dir,
                      log_path, checkpoint_every, callback)


def train(dataset, cfg: TrainConfig, out_dir=None, log_path=None, checkpoint_every: int = 0) -> Checkpoint:
    coarse = train_coarse(dataset, cfg, out_dir, log_path=log_path, checkpoint_every=checkpoint_every)
    return train_fine(dataset, cfg, coarse, out_dir, log_path=log_path, checkpoint_every=checkpoint_every)


def _check_config(ckpt: Checkpoint, cfg: TrainConfig) -> None:
    if ckpt.config_hash != config_hash(cfg):
        raise CheckpointError(f"checkpoint config hash {ckpt.config_hash} differs from {config_hash(cfg)}")
