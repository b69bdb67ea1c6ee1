import numpy as np
import pytest

from latticerf.config import EncodingConfig, LossConfig, ModelConfig, TrainConfig
from latticerf.dataio import DatasetSpec, generate_dataset, load_dataset


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gf[i] = (up - down) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw) -> TrainConfig:
    base = dict(coarse_resolution=7, fine_resolution=9, rays_per_image=24, samples_coarse=8, samples_fine=8,
                views_per_scene_per_epoch=2, lr=1e-3, coarse_steps=3, fine_steps=2,
                loss=LossConfig(lambda_reg=0.01, tau=0.0),
                encoding=EncodingConfig(mode="divisive", alpha=10.0),
                model=ModelConfig(mlp_width=16, n_res_blocks=2, feature_channels=8))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny_ds")
    generate_dataset(DatasetSpec(n_views=5, n_holdout=1, dims=(16, 16), orbit_radius=2.5), d, seed=3)
    return d


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir)


# one PASS/FAIL line per acceptance criterion, printed even under output capture
ACCEPTANCE: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
