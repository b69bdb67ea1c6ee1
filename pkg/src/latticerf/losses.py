"""Training objectives: silhouette geometry, density hinge, view-weighted colour."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .config import LossConfig


def frobenius(residual: ad.Tensor) -> ad.Tensor:
    return ad.sqrt(ad.tsum(residual * residual))


def geometric_loss(silhouettes: Sequence[ad.Tensor], masks: Sequence[np.ndarray]) -> ad.Tensor:
    """Sum over views of ``||silhouette - mask||_F``."""
    if len(silhouettes) != len(masks) or not masks:
        raise ValueError("need one mask per rendered silhouette (and at least one view)")
    total = ad.Tensor(0.0)
    for sil, mask in zip(silhouettes, masks):
        mask = np.asarray(mask, dtype=np.float64)
        if sil.shape != mask.shape:
            raise ValueError(f"silhouette {sil.shape} and mask {mask.shape} differ in size")
        total = total + frobenius(sil - mask)
    return total


def density_regularization(sigmas, cfg: LossConfig) -> ad.Tensor:
    """``lambda_reg * sum(max(0, sigma - tau))``."""
    sigmas = ad.as_tensor(sigmas)
    return ad.tsum(ad.relu(sigmas - cfg.tau)) * cfg.lambda_reg


def coarse_loss(geom: ad.Tensor, reg: ad.Tensor) -> ad.Tensor:
    return geom + reg


def view_weight(source_centers, target_center, epsilon: float) -> np.ndarray:
    """Normalised inverse camera-centre distances from each source to the target."""
    src = np.atleast_2d(np.asarray(source_centers, dtype=np.float64))
    tgt = np.asarray(target_center, dtype=np.float64)
    inv = 1.0 / (np.linalg.norm(src - tgt, axis=1) + epsilon)
    return inv / inv.sum()


def color_loss(predictions: Sequence, target: np.ndarray, weights) -> ad.Tensor:
    """``mean over rays of sum_S W_ST * ||c_S(r) - C(r)||^2``.

    ``predictions`` holds one ``(m, 3)`` prediction per source view.
    """
    target = np.asarray(target, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if len(predictions) != len(weights):
        raise ValueError("one weight per source prediction required")
    total = ad.Tensor(0.0)
    for pred, w in zip(predictions, weights):
        diff = ad.as_tensor(pred) - target
        total = total + ad.tsum(diff * diff) * (float(w) / len(target))
    return total


def total_loss(geom, color, lambda_color: float) -> ad.Tensor:
    return ad.as_tensor(geom) + ad.as_tensor(color) * lambda_color
