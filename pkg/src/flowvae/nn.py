"""Layer primitives for the flow autoencoder: convolution, batch norm,
activations, parameters, and truncated-Gaussian initialization."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .autodiff import Tensor, as_tensor, record, relu, sigmoid, tanh

INIT_STD = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.99


class Parameter:
    """Named trainable tensor; gradient always exists and matches the shape."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.tensor = Tensor(value, requires_grad=True)
        self.tensor.grad = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        if self.tensor.grad is None:
            self.tensor.grad = np.zeros_like(self.tensor.data)
        return self.tensor.grad

    @property
    def shape(self):
        return self.tensor.data.shape

    def zero_grad(self) -> None:
        self.tensor.grad = np.zeros_like(self.tensor.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={tuple(self.shape)})"


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Sample N(0, std^2) rejecting anything beyond two standard deviations."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out.astype(np.float32)


def _same_pad(extent: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-extent // stride)
    total = max((out - 1) * stride + kernel - extent, 0)
    before = total // 2
    return before, total - before


def conv2d(x, weight, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlate an NCHW input with OCkk kernels.

    Zero padding follows the usual same/valid rules; differentiable with
    respect to both the input and the kernels.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(
            f"conv2d expects NCHW input and OCkk kernels, got input shape "
            f"{tuple(x.shape)} and kernel shape {tuple(weight.shape)}")
    n, c, h, w = x.data.shape
    co, ci, kh, kw = weight.data.shape
    if c != ci:
        raise ValueError(
            f"conv2d channel mismatch: input shape {tuple(x.shape)} has {c} "
            f"channels but kernel shape {tuple(weight.shape)} expects {ci}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if padding == "same":
        pt, pb = _same_pad(h, kh, stride)
        pl, pr = _same_pad(w, kw, stride)
    elif padding == "valid":
        if h < kh or w < kw:
            raise ValueError(
                f"conv2d valid padding needs input at least kernel-sized: "
                f"input {tuple(x.shape)}, kernel {tuple(weight.shape)}")
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"conv2d padding must be 'same' or 'valid', got {padding!r}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    hp, wp = xp.shape[2], xp.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    sn, sc, sh, sw = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride))
    cols2 = np.ascontiguousarray(cols.transpose(0, 4, 5, 1, 2, 3)).reshape(
        n * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(co, c * kh * kw)
    out = (cols2 @ wmat.T).reshape(n, oh, ow, co).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, co)
        gw = (gmat.T @ cols2).reshape(co, c, kh, kw)
        dcols = (gmat @ wmat).reshape(n, oh, ow, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pt:pt + h, pl:pl + w]
        return (dx, gw)

    return record("conv2d", (x, weight), out, grad_fn)


class RunningStats:
    """Per-channel exponential moving averages used by batch norm at inference."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float32)
        self.var = np.ones(channels, dtype=np.float32)


def batch_norm(x, gamma, beta, mode: str, running: Optional[RunningStats] = None,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Channel-wise batch normalization over an NCHW tensor.

    Train mode standardizes by batch statistics and updates ``running`` in
    place; infer mode standardizes by the running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ValueError(f"batch_norm expects NCHW, got shape {tuple(x.shape)}")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(
            f"batch_norm affine shapes {tuple(gamma.shape)}/{tuple(beta.shape)} "
            f"do not match {c} channels")
    if mode not in ("train", "infer"):
        raise ValueError(f"batch_norm mode must be 'train' or 'infer', got {mode!r}")

    gam = gamma.data.reshape(1, c, 1, 1)
    bet = beta.data.reshape(1, c, 1, 1)

    if mode == "train":
        if n < 2:
            raise ValueError("batch_norm train mode needs batch size >= 2")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running is not None:
            running.mean[:] = momentum * running.mean + (1 - momentum) * mean
            running.var[:] = momentum * running.var + (1 - momentum) * var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = gam * xhat + bet
        m = n * h * w

        def grad_fn(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            gx = g * gam
            s1 = gx.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gx * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv_std.reshape(1, c, 1, 1) / m) * (m * gx - s1 - xhat * s2)
            return (dx, dgamma, dbeta)

        return record("batch_norm", (x, gamma, beta), out, grad_fn)

    if running is None:
        raise ValueError("batch_norm infer mode needs running statistics")
    inv_std = 1.0 / np.sqrt(running.var + eps)
    shift = running.mean.reshape(1, c, 1, 1)
    scale_ = inv_std.reshape(1, c, 1, 1)
    xhat = (x.data - shift) * scale_
    out = gam * xhat + bet

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        return (g * gam * scale_, dgamma, dbeta)

    return record("batch_norm", (x, gamma, beta), out, grad_fn)


def bias_add(x, b) -> Tensor:
    """Add a per-channel bias to an NCHW tensor."""
    x, b = as_tensor(x), as_tensor(b)
    c = x.data.shape[1]
    out = x.data + b.data.reshape(1, c, 1, 1)
    return record("bias_add", (x, b), out,
                  lambda g: (g, g.sum(axis=(0, 2, 3))))


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def activation(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)
