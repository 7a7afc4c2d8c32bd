"""The flow autoencoder networks: encoder f(T) -> (mu, log-variance), flow
decoder g(S, Z) -> (flow, warped source), and the confidence-mask network
M(S, Z).

All three follow the same skeleton: strided convolutions halve the spatial
extent while channel counts double (capped), the decoder upsamples with
nearest-neighbor interpolation and concatenates multi-scale features of the
source branch, 5x5 filters on the first and last layers and 3x3 elsewhere,
batch normalization everywhere except the final two layers before each
output, truncated-Gaussian weight init.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .losses import LossWeights
from .nn import (Parameter, RunningStats, batch_norm, bias_add, conv2d,
                 relu, sigmoid, tanh, truncated_normal)
from .warp import bilinear_sample


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 1
    base_channels: int = 16
    max_channels: int = 128
    latent_size: int = 2
    latent_channels: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 0.0003
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_threshold: float = 5.0
    batch_size: int = 16
    seed: int = 0
    max_steps: int = 2000
    mask_steps: int = 600
    eval_interval: int = 50
    patience: int = 10
    checkpoint_interval: int = 500
    flow_identity_start: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if not _is_pow2(self.image_size) or self.image_size < 8:
            raise ValueError(f"image_size must be a power of two >= 8, got {self.image_size}")
        if not _is_pow2(self.latent_size):
            raise ValueError(f"latent_size must be a power of two, got {self.latent_size}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.latent_size >= self.image_size:
            raise ValueError("latent_size must be smaller than image_size")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch normalization")

    @property
    def n_stages(self) -> int:
        return int(np.log2(self.image_size // self.latent_size))

    @property
    def stage_channels(self) -> list[int]:
        return [min(self.base_channels * 2 ** i, self.max_channels)
                for i in range(self.n_stages)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        base = dict(image_size=128, channels=3, base_channels=64,
                    max_channels=1024, latent_size=4, latent_channels=1024,
                    batch_size=64)
        base.update(overrides)
        return cls(**base)


@dataclass
class LatentCode:
    mu: np.ndarray
    log_var: np.ndarray
    z: np.ndarray
    eps: np.ndarray


def reparameterize(mu, log_var, rng: Optional[np.random.Generator] = None,
                   eps: Optional[np.ndarray] = None) -> Tensor:
    """z = mu + exp(log_var / 2) * eps with eps ~ N(0, I).

    Pass ``eps`` explicitly to fix the noise; with neither ``rng`` nor
    ``eps``, eps is zero and z equals mu.
    """
    mu, log_var = as_tensor(mu), as_tensor(log_var)
    if mu.data.shape != log_var.data.shape:
        raise ValueError(
            f"reparameterize shape mismatch: {tuple(mu.shape)} vs {tuple(log_var.shape)}")
    if eps is None:
        if rng is None:
            eps = np.zeros(mu.data.shape, dtype=mu.data.dtype)
        else:
            eps = rng.standard_normal(mu.data.shape).astype(mu.data.dtype)
    sigma = ad.exp(ad.scale(log_var, 0.5))
    return ad.add(mu, ad.mul(sigma, as_tensor(eps.astype(mu.data.dtype, copy=False))))


class _ConvLayer:
    """conv -> (bias | batch norm) -> activation, with named parameters."""

    def __init__(self, model: "FVAE", name: str, cin: int, cout: int,
                 kernel: int, stride: int, bn: bool, act: Optional[str]):
        self.name = name
        self.stride = stride
        self.bn = bn
        self.act = act
        self.w = model._param(f"{name}.w", model._init((cout, cin, kernel, kernel)))
        if bn:
            self.gamma = model._param(f"{name}.gamma", np.ones(cout, dtype=np.float32))
            self.beta = model._param(f"{name}.beta", np.zeros(cout, dtype=np.float32))
            self.stats = RunningStats(cout)
            model.running[name] = self.stats
        else:
            self.b = model._param(f"{name}.b", np.zeros(cout, dtype=np.float32))

    def __call__(self, x, train: bool) -> Tensor:
        y = conv2d(x, self.w.tensor, stride=self.stride, padding="same")
        if self.bn:
            y = batch_norm(y, self.gamma.tensor, self.beta.tensor,
                           "train" if train else "infer", self.stats)
        else:
            y = bias_add(y, self.b.tensor)
        if self.act == "relu":
            y = relu(y)
        elif self.act == "tanh":
            y = tanh(y)
        elif self.act == "sigmoid":
            y = sigmoid(y)
        return y


class _Decoder:
    """Source feature branch plus the upsampling stack with concat skips."""

    def __init__(self, model: "FVAE", prefix: str, out_channels: int, head_act: str):
        cfg = model.config
        ch = cfg.stage_channels
        n = cfg.n_stages
        self.branch = []
        cin = cfg.channels
        for i in range(n):
            self.branch.append(_ConvLayer(
                model, f"{prefix}.src{i}", cin, ch[i], 5 if i == 0 else 3,
                stride=2, bn=True, act="relu"))
            cin = ch[i]
        self.stack = []
        for i in range(n - 1, -1, -1):
            cin = (cfg.latent_channels + ch[n - 1]) if i == n - 1 else ch[i + 1] + ch[i]
            self.stack.append(_ConvLayer(
                model, f"{prefix}.up{i}", cin, ch[i], 3,
                stride=1, bn=(i >= 1), act="relu"))
        self.head = _ConvLayer(model, f"{prefix}.head", ch[0], out_channels, 5,
                               stride=1, bn=False, act=None)
        self.head_act = head_act

    def __call__(self, model: "FVAE", source, z, train: bool) -> Tensor:
        feats = []
        h = source
        for layer in self.branch:
            h = layer(h, train)
            feats.append(h)
        x = ad.concat([z, feats[-1]], axis=1)
        n = len(self.stack)
        for k, layer in enumerate(self.stack):
            x = layer(x, train)
            x = ad.upsample_nearest(x, 2)
            skip_idx = n - 2 - k
            if skip_idx >= 0:
                x = ad.concat([x, feats[skip_idx]], axis=1)
        raw = self.head(x, train)
        if self.head_act == "tanh_flow":
            if model.config.flow_identity_start:
                raw = ad.add(raw, as_tensor(model.flow_grid_bias))
            return tanh(raw)
        return sigmoid(raw)


class FVAE:
    """Model container: parameters, running statistics, and the forward passes."""

    def __init__(self, config: ModelConfig, init_rng: Optional[np.random.Generator] = None):
        self.config = config
        self.params: dict[str, Parameter] = {}
        self.param_order: list[str] = []
        self.running: dict[str, RunningStats] = {}
        self._init_rng = init_rng if init_rng is not None else \
            np.random.default_rng(np.random.PCG64(config.seed))
        self.flow_grid_bias = self._make_grid_bias(config.image_size)

        ch = config.stage_channels
        n = config.n_stages
        self.enc = []
        cin = config.channels
        for i in range(n):
            self.enc.append(_ConvLayer(
                self, f"f.enc{i}", cin, ch[i], 5 if i == 0 else 3,
                stride=2, bn=(i < n - 1), act="relu"))
            cin = ch[i]
        self.enc_mu = _ConvLayer(self, "f.mu", ch[n - 1], config.latent_channels,
                                 3, stride=1, bn=False, act=None)
        self.enc_logvar = _ConvLayer(self, "f.logvar", ch[n - 1], config.latent_channels,
                                     3, stride=1, bn=False, act=None)
        self.decoder = _Decoder(self, "g", 2, "tanh_flow")
        self.masker = _Decoder(self, "m", 1, "sigmoid")

    @staticmethod
    def _make_grid_bias(size: int) -> np.ndarray:
        # Pre-activation bias so the tanh flow head starts at the identity
        # warp instead of collapsing every sample to the image center.
        lim = 1.0 - 1e-3
        coord = np.clip(2.0 * np.arange(size) / (size - 1) - 1.0, -lim, lim)
        grid = np.empty((1, 2, size, size), dtype=np.float32)
        grid[0, 0] = np.arctanh(coord)[None, :]
        grid[0, 1] = np.arctanh(coord)[:, None]
        return grid

    def _init(self, shape) -> np.ndarray:
        return truncated_normal(self._init_rng, shape)

    def _param(self, name: str, value: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value)
        self.params[name] = p
        self.param_order.append(name)
        return p

    def parameters(self, prefix: Optional[str] = None) -> list[Parameter]:
        if prefix is None:
            return [self.params[k] for k in self.param_order]
        return [self.params[k] for k in self.param_order if k.startswith(prefix)]

    def fvae_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.name.startswith(("f.", "g."))]

    def mask_parameters(self) -> list[Parameter]:
        return self.parameters("m.")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _check_input(self, x: Tensor, what: str) -> None:
        s = self.config.image_size
        c = self.config.channels
        if x.ndim != 4 or x.data.shape[1] != c or x.data.shape[2] != s or x.data.shape[3] != s:
            raise ValueError(
                f"{what} must have shape (N, {c}, {s}, {s}), got {tuple(x.shape)}")

    def encode(self, target, train: bool = False) -> tuple[Tensor, Tensor]:
        t = as_tensor(target)
        self._check_input(t, "encoder input")
        h = t
        for layer in self.enc:
            h = layer(h, train)
        return self.enc_mu(h, train), self.enc_logvar(h, train)

    def decode(self, source, z, train: bool = False) -> tuple[Tensor, Tensor]:
        """Returns (flow with shape (N, H, W, 2), warped source)."""
        s = as_tensor(source)
        self._check_input(s, "decoder source")
        z = as_tensor(z)
        ls, lc = self.config.latent_size, self.config.latent_channels
        if z.data.shape[1:] != (lc, ls, ls):
            raise ValueError(
                f"latent must have shape (N, {lc}, {ls}, {ls}), got {tuple(z.shape)}")
        flow_nchw = self.decoder(self, s, z, train)
        flow = ad.transpose(flow_nchw, (0, 2, 3, 1))
        warped = bilinear_sample(s, flow)
        return flow, warped

    def predict_mask(self, source, z, train: bool = False) -> Tensor:
        s = as_tensor(source)
        self._check_input(s, "mask source")
        return self.masker(self, s, as_tensor(z), train)

    # numpy-facing inference helpers (no tape, eps = 0)
    def encode_np(self, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mu, lv = self.encode(np.asarray(target, dtype=np.float32), train=False)
        return mu.data, lv.data

    def encode_latent(self, target: np.ndarray,
                      rng: Optional[np.random.Generator] = None) -> LatentCode:
        mu, lv = self.encode_np(target)
        if rng is None:
            eps = np.zeros_like(mu)
        else:
            eps = rng.standard_normal(mu.shape).astype(mu.dtype)
        z = mu + np.exp(lv / 2.0) * eps
        return LatentCode(mu=mu, log_var=lv, z=z, eps=eps)

    def decode_np(self, source: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        flow, warped = self.decode(np.asarray(source, dtype=np.float32),
                                   np.asarray(z, dtype=np.float32), train=False)
        return flow.data, warped.data

    def predict_mask_np(self, source: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.predict_mask(np.asarray(source, dtype=np.float32),
                                 np.asarray(z, dtype=np.float32), train=False).data
