import numpy as np
import pytest

from latticerf import autodiff as ad
from latticerf.config import LossConfig
from latticerf.losses import (color_loss, coarse_loss, density_regularization, geometric_loss,
                              total_loss, view_weight)
import oracles


def test_geometric_loss_examples():
    mask = np.zeros((6, 6))
    mask[1:3, 2:5] = 1.0
    assert float(geometric_loss([ad.Tensor(mask)], [mask]).data) == 0.0
    zero = ad.Tensor(np.zeros((6, 6)))
    assert float(geometric_loss([zero, zero], [mask, mask]).data) == pytest.approx(2 * np.sqrt(6))
    with pytest.raises(ValueError):
        geometric_loss([zero], [np.zeros((5, 6))])
    with pytest.raises(ValueError):
        geometric_loss([], [])


def test_density_regularization_examples():
    cfg = LossConfig(lambda_reg=0.01, tau=0.3)
    assert float(density_regularization(np.array([0.0, 0.1, 0.3]), cfg).data) == 0.0
    assert float(density_regularization(np.array([0.0, 1.3]), cfg).data) == pytest.approx(0.01)


def test_view_weight_examples(rng):
    assert view_weight([[1.0, 0, 0]], [0, 0, 0], 1e-8).tolist() == [1.0]
    np.testing.assert_allclose(view_weight([[1.0, 0, 0], [0, 2.0, 0]], [0, 0, 0], 1e-15), [2 / 3, 1 / 3])
    for _ in range(100):
        n = int(rng.integers(1, 7))
        src = rng.normal(size=(n, 3)) * 3
        tgt = rng.normal(size=3)
        w = view_weight(src, tgt, 1e-8)
        np.testing.assert_allclose(w, oracles.view_weights(src.tolist(), tgt.tolist(), 1e-8), rtol=0, atol=1e-12)
        assert abs(w.sum() - 1.0) <= 1e-9


def test_color_loss_matches_scalar_oracle(rng):
    preds = [rng.random((10, 3)) for _ in range(3)]
    target = rng.random((10, 3))
    w = np.array([0.5, 0.3, 0.2])
    got = float(color_loss(preds, target, w).data)
    ref = 0.0
    for r in range(10):
        for s in range(3):
            ref += w[s] * sum((preds[s][r][j] - target[r][j]) ** 2 for j in range(3))
    assert abs(got - ref / 10) <= 1e-12
    with pytest.raises(ValueError):
        color_loss(preds, target, w[:2])


def test_combinations():
    assert float(coarse_loss(ad.Tensor(2.0), ad.Tensor(0.5)).data) == 2.5
    assert float(total_loss(3.0, 7.0, 0.0).data) == 3.0
    assert float(total_loss(3.0, 7.0, 0.5).data) == 6.5
