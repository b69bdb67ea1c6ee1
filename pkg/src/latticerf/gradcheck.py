"""Finite-difference verification of every training loss on a tiny fixture."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import LossConfig, ModelConfig, TrainConfig
from .dataio import OrbitSpec, sphere_scene, synthetic_views
from .fusion import field_from_constants, make_context, point_constants
from .geometry import generate_lattice, rays_for_pixels
from .losses import color_loss, density_regularization, geometric_loss, total_loss, view_weight
from .nnet import FieldModel
from .renderer import gather_neighborhoods, render_neighborhoods, splat_footprint, splat_silhouette
from .spatial import build_index

LOSS_NAMES = ("L_geom", "L_reg", "L_color", "L_total")


@dataclass
class GradcheckResult:
    name: str
    max_rel_err: float
    n_probes: int
    tol: float
    worst: tuple
    n_redrawn: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def toy_losses(seed: int = 0, dims=(16, 16), resolution: int = 9, n_rays: int = 48,
               model_cfg: ModelConfig | None = None):
    """Two-view sphere fixture; returns ``(model, {name: closure -> scalar Tensor})``."""
    rng = np.random.default_rng(seed)
    scene = sphere_scene(0.6, orbit=OrbitSpec(radius=2.5))
    src, tgt = synthetic_views(scene, dims, 2, rng, prefix="toy")
    # keep encoder pre-activations off the relu kink (black pixels + zero bias sit exactly on it)
    for v in (src, tgt):
        v.image = 0.1 + 0.8 * v.image + 0.05 * rng.random(v.image.shape)
    cfg = TrainConfig(coarse_resolution=resolution, fine_resolution=resolution, samples_fine=12,
                      loss=LossConfig(lambda_reg=0.05, tau=0.5), model=model_cfg or ModelConfig(mlp_width=32, feature_channels=8))
    model = FieldModel(cfg.encoding, cfg.model, seed)
    lattice = generate_lattice(resolution)
    fhw = (dims[0] // 4, dims[1] // 4)
    const = point_constants(lattice, src.pose, dims, fhw, cfg.encoding)
    fps = [splat_footprint(lattice, v.pose, dims, cfg.splat_sigma_px) for v in (src, tgt)]
    pix = np.sort(rng.choice(dims[0] * dims[1], n_rays, replace=False))
    uv = np.stack([pix % dims[1] + 0.5, pix // dims[1] + 0.5], axis=1)
    o, d, tn, tf, hit = rays_for_pixels(tgt.pose, uv)
    nb = gather_neighborhoods(build_index(lattice, resolution), o, d, tn, tf, hit, cfg.samples_fine, cfg.k,
                              cfg.neighbor_radius(resolution))
    ray_const = point_constants(lattice[nb.unique], src.pose, dims, fhw, cfg.encoding)
    target = tgt.image.reshape(-1, 3)[pix]
    weights = view_weight([src.pose.center], tgt.pose.center, cfg.loss.epsilon)

    def geom():
        sigma, _ = field_from_constants(model, make_context(model, src), const)
        return geometric_loss([splat_silhouette(sigma, fp) for fp in fps], [src.mask, tgt.mask])

    def reg():
        sigma, _ = field_from_constants(model, make_context(model, src), const)
        return density_regularization(sigma, cfg.loss)

    def color():
        s, c = field_from_constants(model, make_context(model, src), ray_const)
        rgb, _ = render_neighborhoods(s, c, nb, cfg.loss.epsilon, cfg.background)
        return color_loss([rgb], target, weights)

    def total():
        return total_loss(geom() + reg(), color(), cfg.loss.lambda_color)

    return model, dict(zip(LOSS_NAMES, (geom, reg, color, total)))


def _straddles_kink(a: list, b: list) -> bool:
    return len(a) != len(b) or any(x.shape != y.shape or (x != y).any() for x, y in zip(a, b))


def check_gradients(model: FieldModel, loss_fn: Callable[[], ad.Tensor], n_probes: int = 200,
                    h: float = 1e-5, rng: np.random.Generator | None = None,
                    grad_hook: Callable | None = None, floor: float = 1e-6, max_redraws: int = 2000):
    """Central differences at randomly probed parameters.

    Probes pick a parameter tensor uniformly, then an entry uniformly, so small
    tensors such as biases are covered.  A probe whose ``+h``/``-h`` evaluations
    take different relu branches is redrawn (its difference quotient is not a
    derivative).  ``grad_hook`` may rewrite the analytic gradients before the
    comparison, which is how corruption detection is tested.

    Returns ``(max_rel_err, worst_probe, n_redrawn)``.
    """
    rng = rng or np.random.default_rng(0)
    params = model.parameters()
    model.zero_grad()
    ad.backward(loss_fn())
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if grad_hook is not None:
        grads = grad_hook(grads)
    worst, max_rel, done, redrawn = None, 0.0, 0, 0
    while done < n_probes:
        t = int(rng.integers(len(params)))
        i = int(rng.integers(params[t].data.size))
        p = params[t].data.reshape(-1)
        orig = p[i]
        try:
            p[i] = orig + h
            with ad.no_grad(), ad.record_kinks() as k_up:
                up = float(loss_fn().data)
            p[i] = orig - h
            with ad.no_grad(), ad.record_kinks() as k_down:
                down = float(loss_fn().data)
        finally:
            p[i] = orig
        if _straddles_kink(k_up, k_down):
            redrawn += 1
            if redrawn > max_redraws:
                raise RuntimeError("too many probes straddle relu kinks; fixture is degenerate")
            continue
        done += 1
        numeric = (up - down) / (2.0 * h)
        analytic = float(grads[t].reshape(-1)[i])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        if worst is None or rel > max_rel:
            max_rel = max(max_rel, rel)
            worst = (t, i, analytic, numeric)
    return max_rel, worst, redrawn


def run_gradcheck(n_probes: int = 200, h: float = 1e-5, tol: float = 1e-3, seed: int = 0,
                  grad_hook: Callable | None = None, names=LOSS_NAMES) -> list[GradcheckResult]:
    model, losses = toy_losses(seed)
    results = []
    for k, name in enumerate(names):
        rng = np.random.default_rng([seed, k])
        rel, worst, redrawn = check_gradients(model, losses[name], n_probes, h, rng, grad_hook)
        results.append(GradcheckResult(name, rel, n_probes, tol, worst, redrawn))
    return results


def format_report(results) -> str:
    lines = [f"{'loss':<10}{'probes':>8}{'redrawn':>9}{'max rel err':>14}  status"]
    for r in results:
        lines.append(f"{r.name:<10}{r.n_probes:>8}{r.n_redrawn:>9}{r.max_rel_err:>14.3e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
