"""Image and point-cloud quality metrics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    x = np.arange(window) - (window - 1) / 2.0
    k = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = len(k)
    rows = sum(k[i] * img[i:img.shape[0] - n + 1 + i, :] for i in range(n))
    return sum(k[j] * rows[:, j:rows.shape[1] - n + 1 + j] for j in range(n))


def ssim(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03, peak: float = 1.0,
         sigma: float = 1.5) -> float:
    """Mean structural similarity with a Gaussian window (valid region only).

    Colour images are reduced to gray by averaging channels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(axis=2), b.mean(axis=2)
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    k = _gaussian_kernel(window, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, k), _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a * mu_a
    var_b = _filter_valid(b * b, k) - mu_b * mu_b
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# earth mover's distance


def auction(cost: np.ndarray, eps_final: float | None = None, scale: float = 5.0) -> np.ndarray:
    """Forward auction with epsilon scaling; returns an assignment within ``n * eps`` of optimal."""
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    benefit = -cost
    spread = float(np.ptp(cost)) or 1.0
    if eps_final is None:
        eps_final = 1e-4 * float(cost.mean() if cost.mean() > 0 else 1.0) / n
    price = np.zeros(n)
    eps = spread / 4.0
    owner = np.full(n, -1)
    while True:
        owner[:] = -1
        assigned = np.full(n, -1)
        while (assigned < 0).any():
            bidders = np.flatnonzero(assigned < 0)
            values = benefit[bidders] - price[None, :]
            best = np.argmax(values, axis=1)
            top = values[np.arange(len(bidders)), best]
            values[np.arange(len(bidders)), best] = -np.inf
            second = values.max(axis=1) if n > 1 else top
            bid = price[best] + (top - second) + eps
            # highest bid per object wins; ties go to the lowest bidder index
            order = np.lexsort((bidders, -bid))
            objs, first = np.unique(best[order], return_index=True)
            winners = bidders[order[first]]
            price[objs] = bid[order[first]]
            prev = owner[objs]
            assigned[prev[prev >= 0]] = -1
            owner[objs] = winners
            assigned[winners] = objs
        if eps <= eps_final:
            return assigned
        eps = max(eps / scale, eps_final)


def emd(cloud_a, cloud_b, mode: str = "exact") -> float:
    """Mean matched Euclidean distance between equal-size clouds."""
    a = np.asarray(cloud_a, dtype=np.float64)
    b = np.asarray(cloud_b, dtype=np.float64)
    if len(a) != len(b):
        raise ValueError(f"EMD needs equal-size clouds, got {len(a)} and {len(b)}")
    if len(a) == 0:
        return 0.0
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    if mode == "exact":
        if len(a) > 512:
            raise ValueError("exact EMD is limited to 512 points; subsample or use mode='approx'")
        _, perm = linear_sum_assignment(cost)
    elif mode == "approx":
        perm = auction(cost)
    else:
        raise ValueError(f"unknown EMD mode {mode!r}")
    return float(cost[np.arange(len(a)), perm].sum() / len(a))


def cloud_emd(cloud_a, cloud_b, max_points: int = 512, seed: int = 0, mode: str = "exact") -> float:
    """EMD after seeded uniform subsampling of both clouds to a common size."""
    rng = np.random.default_rng(seed)
    a = np.asarray(cloud_a, dtype=np.float64)
    b = np.asarray(cloud_b, dtype=np.float64)
    n = min(len(a), len(b), max_points)
    if n == 0:
        return math.inf
    a = a[np.sort(rng.choice(len(a), n, replace=False))]
    b = b[np.sort(rng.choice(len(b), n, replace=False))]
    return emd(a, b, mode)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    views: list = field(default_factory=list)
    emd: float | None = None
    config_hash: str = ""
    split: str = ""

    def aggregates(self) -> dict:
        def stats(xs):
            finite = [x for x in xs if math.isfinite(x)]
            if not finite:
                return {"mean": None, "std": None}
            return {"mean": float(np.mean(finite)), "std": float(np.std(finite))}
        return {"psnr": stats(self.psnr), "ssim": stats(self.ssim)}

    def to_json(self) -> dict:
        def enc(x):
            return "inf" if x == math.inf else x
        return {"schema": "latticerf.metric_report/1", "config_hash": self.config_hash,
                "split": self.split,
                "per_view": [{"view": v, "psnr": enc(p), "ssim": s}
                             for v, p, s in zip(self.views, self.psnr, self.ssim)],
                "emd": self.emd, "aggregate": self.aggregates()}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)

    def table(self) -> str:
        lines = [f"{'view':<24}{'PSNR (dB)':>12}{'SSIM':>10}"]
        for v, p, s in zip(self.views, self.psnr, self.ssim):
            lines.append(f"{v:<24}{p:>12.3f}{s:>10.4f}")
        agg = self.aggregates()
        if agg["psnr"]["mean"] is not None:
            lines.append(f"{'mean':<24}{agg['psnr']['mean']:>12.3f}{agg['ssim']['mean']:>10.4f}")
        if self.emd is not None:
            lines.append(f"EMD: {self.emd:.5f}")
        return "\n".join(lines)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema", "config_hash", "split", "per_view", "emd", "aggregate"],
    "properties": {
        "schema": {"const": "latticerf.metric_report/1"},
        "config_hash": {"type": "string"},
        "split": {"type": "string"},
        "per_view": {"type": "array", "items": {
            "type": "object", "required": ["view", "psnr", "ssim"],
            "properties": {"view": {"type": "string"},
                           "psnr": {"anyOf": [{"type": "number"}, {"const": "inf"}]},
                           "ssim": {"type": "number", "minimum": -1, "maximum": 1}}}},
        "emd": {"type": ["number", "null"], "minimum": 0},
        "aggregate": {"type": "object"},
    },
}
