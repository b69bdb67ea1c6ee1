"""Residual MLP field head and the compact strided-convolution image encoder."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .config import ConfigError, EncodingConfig, ModelConfig


def he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = ad.parameter(he_uniform(rng, n_in, (n_in, n_out)))
        self.bias = ad.parameter(np.zeros(n_out))

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.linear(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class ResBlock:
    """``relu(h + W2 relu(W1 h))``."""

    def __init__(self, width: int, rng: np.random.Generator):
        self.fc1 = Linear(width, width, rng)
        self.fc2 = Linear(width, width, rng)

    def __call__(self, h):
        return ad.relu(h + self.fc2(ad.relu(self.fc1(h))))

    def parameters(self):
        return self.fc1.parameters() + self.fc2.parameters()


class MlpModel:
    """Maps ``[features, PosE(x), PosE(d)]`` to density and RGB."""

    def __init__(self, feature_dim: int, encoding: EncodingConfig, cfg: ModelConfig,
                 rng: np.random.Generator):
        self.feature_dim = feature_dim
        self.input_dim = feature_dim + 2 * encoding.C
        self.cfg = cfg
        self.inp = Linear(self.input_dim, cfg.mlp_width, rng)
        self.blocks = [ResBlock(cfg.mlp_width, rng) for _ in range(cfg.n_res_blocks)]
        self.head = Linear(cfg.mlp_width, 4, rng)

    def parameters(self):
        params = self.inp.parameters()
        for blk in self.blocks:
            params += blk.parameters()
        return params + self.head.parameters()

    def __call__(self, x: ad.Tensor):
        h = ad.relu(self.inp(x))
        for blk in self.blocks:
            h = blk(h)
        out = self.head(h)
        raw_sigma = out[:, 0]
        if self.cfg.density_activation == "softplus":
            sigma = ad.softplus(raw_sigma)
        else:
            sigma = ad.relu(raw_sigma)
        if self.cfg.density_scale != 1.0:
            sigma = sigma * self.cfg.density_scale
        return sigma, ad.sigmoid(out[:, 1:4])


def forward_mlp(features, pos_enc_x, pos_enc_d, model: MlpModel):
    """Evaluate the field head on one point (1-D inputs) or a batch (2-D inputs)."""
    parts = [ad.as_tensor(p) for p in (features, pos_enc_x, pos_enc_d)]
    single = parts[0].ndim == 1
    if single:
        parts = [ad.reshape(p, (1, -1)) for p in parts]
    width = sum(p.shape[1] for p in parts)
    if width != model.input_dim or parts[0].shape[1] != model.feature_dim:
        raise ConfigError(f"MLP input width {width} does not match model input {model.input_dim}")
    sigma, rgb = model(ad.concat(parts, axis=1))
    if single:
        return sigma[0], rgb[0]
    return sigma, rgb


# ---------------------------------------------------------------------------
# encoder


@lru_cache(maxsize=32)
def _im2col_index(H: int, W: int, stride: int):
    Ho = (H - 1) // stride + 1
    Wo = (W - 1) // stride + 1
    oy, ox = np.meshgrid(np.arange(Ho), np.arange(Wo), indexing="ij")
    ky, kx = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
    iy = oy.reshape(-1, 1) * stride + ky.reshape(1, -1) - 1
    ix = ox.reshape(-1, 1) * stride + kx.reshape(1, -1) - 1
    inside = (iy >= 0) & (iy < H) & (ix >= 0) & (ix < W)
    idx = np.where(inside, iy * W + ix, H * W)
    idx.setflags(write=False)
    return idx, Ho, Wo


class Conv3x3:
    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.weight = ad.parameter(he_uniform(rng, 9 * c_in, (9 * c_in, c_out)))
        self.bias = ad.parameter(np.zeros(c_out))

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        H, W, C = x.shape
        idx, Ho, Wo = _im2col_index(H, W, self.stride)
        flat = ad.concat([ad.reshape(x, (H * W, C)), np.zeros((1, C))], axis=0)
        cols = ad.reshape(ad.take_rows(flat, idx), (Ho * Wo, 9 * C))
        return ad.reshape(ad.linear(cols, self.weight, self.bias), (Ho, Wo, self.c_out))

    def parameters(self):
        return [self.weight, self.bias]


class EncoderModel:
    """Three 3x3 conv stages (stride 2, 2, 1): ``H x W x 3 -> H/4 x W/4 x C_f``."""

    def __init__(self, feature_channels: int, rng: np.random.Generator):
        self.feature_channels = feature_channels
        self.stages = [Conv3x3(3, 16, 2, rng), Conv3x3(16, 32, 2, rng),
                       Conv3x3(32, feature_channels, 1, rng)]

    def parameters(self):
        return [p for s in self.stages for p in s.parameters()]

    def __call__(self, image) -> ad.Tensor:
        x = ad.as_tensor(image)
        H, W = x.shape[:2]
        if H % 4 or W % 4:
            raise ConfigError(f"image dims must be divisible by 4, got {H}x{W}")
        x = ad.relu(self.stages[0](x))
        x = ad.relu(self.stages[1](x))
        return self.stages[2](x)


def forward_encoder(image, model: EncoderModel) -> ad.Tensor:
    return model(image)


class FieldModel:
    """Encoder + MLP with a flat, declaration-ordered parameter list."""

    def __init__(self, encoding: EncodingConfig, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.encoding = encoding
        self.cfg = cfg
        self.encoder = EncoderModel(cfg.feature_channels, rng)
        self.mlp = MlpModel(cfg.feature_channels, encoding, cfg, rng)

    def parameters(self) -> list[ad.Tensor]:
        return self.encoder.parameters() + self.mlp.parameters()

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays) -> None:
        params = self.parameters()
        arrays = list(arrays)
        if len(arrays) != len(params):
            raise ConfigError(f"expected {len(params)} parameter arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != p.data.shape:
                raise ConfigError(f"parameter shape mismatch {a.shape} vs {p.data.shape}")
            p.data = a.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())
