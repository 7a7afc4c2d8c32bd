"""Differentiable bilinear warping by a dense flow field, flow-domain
upsampling, and the on-disk displacement format.

A flow field stores, for every output pixel, the normalized (x, y)
coordinate in [-1, 1] of the source location to sample. Corner alignment
maps -1 to 0 and +1 to extent-1, which makes the identity flow
resolution-independent. Coordinates are kept in double precision so that
identity warps and file round trips are exact; training tensors stay in
single precision.
"""

from __future__ import annotations

import struct
from typing import Optional

import numpy as np

from .autodiff import Tensor, as_tensor, record

FLOW_MAGIC = 202021.25


class FlowFileError(ValueError):
    """Malformed flow file; message carries the byte offset."""


class FlowField:
    """Per-pixel normalized sampling coordinates, shape (H, W, 2)."""

    __slots__ = ("coords",)

    def __init__(self, coords: np.ndarray):
        arr = np.asarray(coords, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ValueError(f"flow coords must have shape (H, W, 2), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("flow coords contain non-finite values")
        self.coords = arr

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]

    def __repr__(self) -> str:
        return f"FlowField({self.height}x{self.width})"


def identity_flow(height: int, width: int) -> FlowField:
    """Flow in which every pixel samples its own coordinate."""
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    xn = 2.0 * xs / (width - 1) - 1.0
    yn = 2.0 * ys / (height - 1) - 1.0
    coords = np.empty((height, width, 2), dtype=np.float64)
    coords[:, :, 0] = xn[None, :]
    coords[:, :, 1] = yn[:, None]
    return FlowField(coords)


def denormalize_flow(flow: FlowField, src_width: int, src_height: int) -> np.ndarray:
    """Map normalized coordinates to absolute pixel coordinates.

    -1 maps to 0 and +1 maps to extent-1 on each axis.
    """
    if src_width < 2 or src_height < 2:
        raise ValueError(f"source extents must be >= 2, got {src_width}x{src_height}")
    out = np.empty_like(flow.coords)
    out[:, :, 0] = (flow.coords[:, :, 0] + 1.0) * 0.5 * (src_width - 1)
    out[:, :, 1] = (flow.coords[:, :, 1] + 1.0) * 0.5 * (src_height - 1)
    return out


def _sample_forward(src: np.ndarray, fl: np.ndarray):
    """Shared forward math: src (N,C,H,W), fl (N,Ho,Wo,2) normalized."""
    n, c, h, w = src.shape
    xa = (fl[..., 0] + 1.0) * 0.5 * (w - 1)
    ya = (fl[..., 1] + 1.0) * 0.5 * (h - 1)
    in_x = (xa >= 0) & (xa <= w - 1)
    in_y = (ya >= 0) & (ya <= h - 1)
    xc = np.clip(xa, 0, w - 1)
    yc = np.clip(ya, 0, h - 1)
    x0 = np.clip(np.floor(xc), 0, w - 2).astype(np.intp)
    y0 = np.clip(np.floor(yc), 0, h - 2).astype(np.intp)
    fx = xc - x0
    fy = yc - y0
    b = np.arange(n, dtype=np.intp)[:, None, None]
    s00 = src[b, :, y0, x0]
    s01 = src[b, :, y0, x0 + 1]
    s10 = src[b, :, y0 + 1, x0]
    s11 = src[b, :, y0 + 1, x0 + 1]
    wx, wy = fx[..., None], fy[..., None]
    out_nhwc = (s00 * (1 - wx) * (1 - wy) + s01 * wx * (1 - wy)
                + s10 * (1 - wx) * wy + s11 * wx * wy)
    out = np.ascontiguousarray(out_nhwc.transpose(0, 3, 1, 2))
    cache = (x0, y0, fx, fy, in_x, in_y, s00, s01, s10, s11)
    return out, cache


def bilinear_sample(source, flow) -> Tensor:
    """Warp a source image by a flow of normalized sampling coordinates.

    ``source`` is CHW or NCHW; ``flow`` is a FlowField, an (H, W, 2) array,
    or an (N, H, W, 2) tensor. Out-of-range coordinates are clamped to the
    border and contribute zero gradient to the clamped component.
    Differentiable with respect to both the source and the flow.
    """
    if isinstance(flow, FlowField):
        flow = Tensor(flow.coords, dtype=np.float64)
    source, flow = as_tensor(source), as_tensor(flow)
    squeeze = False
    if source.ndim == 3:
        if flow.ndim != 3:
            raise ValueError("unbatched source needs unbatched flow")
        source = _expand0(source)
        flow = _expand0(flow)
        squeeze = True
    if source.ndim != 4 or flow.ndim != 4 or flow.data.shape[3] != 2:
        raise ValueError(
            f"bilinear_sample expects NCHW source and (N,H,W,2) flow, got "
            f"{tuple(source.shape)} and {tuple(flow.shape)}")
    n, c, h, w = source.data.shape
    if h < 2 or w < 2:
        raise ValueError(f"source extents must be >= 2 per axis, got {h}x{w}")
    if flow.data.shape[0] != n:
        raise ValueError("source and flow batch sizes differ")

    dtype = np.result_type(source.data.dtype, flow.data.dtype)
    src = source.data.astype(dtype, copy=False)
    fl = flow.data.astype(np.float64, copy=False)
    out, cache = _sample_forward(src.astype(np.float64, copy=False), fl)
    out = out.astype(dtype, copy=False)
    x0, y0, fx, fy, in_x, in_y, s00, s01, s10, s11 = cache

    def grad_fn(g):
        g64 = g.astype(np.float64, copy=False)
        gn = np.ascontiguousarray(g64.transpose(0, 2, 3, 1))  # (N,Ho,Wo,C)
        wx, wy = fx[..., None], fy[..., None]
        dsrc = None
        if source.requires_grad:
            dsrc = np.zeros((n, c, h * w), dtype=np.float64)
            b3 = np.broadcast_to(np.arange(n, dtype=np.intp)[:, None, None],
                                 x0.shape).reshape(n, 1, -1)
            c3 = np.arange(c, dtype=np.intp)[None, :, None]
            for xi, yi, wgt in (
                    (x0, y0, (1 - wx) * (1 - wy)), (x0 + 1, y0, wx * (1 - wy)),
                    (x0, y0 + 1, (1 - wx) * wy), (x0 + 1, y0 + 1, wx * wy)):
                idx = (yi * w + xi).reshape(n, 1, -1)
                vals = (gn * wgt).transpose(0, 3, 1, 2).reshape(n, c, -1)
                np.add.at(dsrc, (b3, c3, idx), vals)
            dsrc = dsrc.reshape(n, c, h, w).astype(source.data.dtype, copy=False)
        dflow = None
        if flow.requires_grad:
            dxa = (gn * ((s01 - s00) * (1 - wy) + (s11 - s10) * wy)).sum(axis=3)
            dya = (gn * ((s10 - s00) * (1 - wx) + (s11 - s01) * wx)).sum(axis=3)
            dxa = np.where(in_x, dxa, 0.0) * (0.5 * (w - 1))
            dya = np.where(in_y, dya, 0.0) * (0.5 * (h - 1))
            dflow = np.stack([dxa, dya], axis=3).astype(flow.data.dtype, copy=False)
        return (dsrc, dflow)

    result = record("bilinear_sample", (source, flow), out, grad_fn)
    if squeeze:
        result = _squeeze0(result)
    return result


def _expand0(t: Tensor) -> Tensor:
    old = t.data.shape
    return record("expand0", (t,), t.data[None], lambda g: (g.reshape(old),))


def _squeeze0(t: Tensor) -> Tensor:
    old = t.data.shape
    return record("squeeze0", (t,), t.data[0], lambda g: (g.reshape(old),))


def warp_image(source: np.ndarray, flow: FlowField) -> np.ndarray:
    """Warp a plain (H, W) or (C, H, W) image, preserving its dtype."""
    src = np.asarray(source)
    gray = src.ndim == 2
    chw = src[None] if gray else src
    out, _ = _sample_forward(chw[None].astype(np.float64), flow.coords[None])
    out = out[0]
    if gray:
        out = out[0]
    return out.astype(src.dtype, copy=False)


def upsample_flow(flow: FlowField, factor: int) -> FlowField:
    """Bilinearly interpolate normalized coordinates onto a factor-times
    grid with corner alignment."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return FlowField(flow.coords.copy())
    h, w = flow.height, flow.width
    ho, wo = h * factor, w * factor

    def axis_coords(n_in: int, n_out: int):
        if n_in == 1:
            zero = np.zeros(n_out, dtype=np.intp)
            return zero, zero, np.zeros(n_out)
        pos = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
        i0 = np.clip(np.floor(pos), 0, n_in - 2).astype(np.intp)
        return i0, i0 + 1, pos - i0

    y0, y1, fy = axis_coords(h, ho)
    x0, x1, fx = axis_coords(w, wo)
    c = flow.coords
    top = c[y0][:, x0] * ((1 - fy)[:, None, None] * (1 - fx)[None, :, None]) \
        + c[y0][:, x1] * ((1 - fy)[:, None, None] * fx[None, :, None])
    bot = c[y1][:, x0] * (fy[:, None, None] * (1 - fx)[None, :, None]) \
        + c[y1][:, x1] * (fy[:, None, None] * fx[None, :, None])
    return FlowField(top + bot)


def downsample_area(image: np.ndarray, factor: int) -> np.ndarray:
    """Area-average an (H, W) or (C, H, W) image by an integer factor."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"downsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    img = np.asarray(image)
    gray = img.ndim == 2
    chw = img[None] if gray else img
    c, h, w = chw.shape
    if h % factor or w % factor:
        raise ValueError(f"extents {h}x{w} not divisible by factor {factor}")
    out = chw.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    out = out.astype(img.dtype, copy=False)
    return out[0] if gray else out


def export_flow(flow: FlowField, path, src_width: Optional[int] = None,
                src_height: Optional[int] = None) -> None:
    """Write per-pixel displacement (absolute sampling coordinate minus the
    pixel's own coordinate) as little-endian float32 with the standard
    sanity-magic header."""
    w = flow.width if src_width is None else src_width
    h = flow.height if src_height is None else src_height
    absc = denormalize_flow(flow, w, h)
    disp = np.empty_like(absc)
    disp[:, :, 0] = absc[:, :, 0] - np.arange(flow.width, dtype=np.float64)[None, :]
    disp[:, :, 1] = absc[:, :, 1] - np.arange(flow.height, dtype=np.float64)[:, None]
    payload = disp.astype("<f4").tobytes()
    header = struct.pack("<fii", FLOW_MAGIC, flow.width, flow.height)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def import_flow(path, src_width: Optional[int] = None,
                src_height: Optional[int] = None) -> FlowField:
    """Read a displacement file back into normalized coordinates."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise FlowFileError(f"flow file truncated in header at byte offset {len(raw)}")
    (magic,) = struct.unpack_from("<f", raw, 0)
    if magic != np.float32(FLOW_MAGIC):
        raise FlowFileError(f"bad flow magic {magic!r} at byte offset 0")
    if len(raw) < 12:
        raise FlowFileError(f"flow file truncated in header at byte offset {len(raw)}")
    width, height = struct.unpack_from("<ii", raw, 4)
    if width < 1 or height < 1:
        raise FlowFileError(f"bad flow extents {width}x{height} at byte offset 4")
    expected = 12 + 8 * width * height
    if len(raw) != expected:
        raise FlowFileError(
            f"flow payload truncated at byte offset {len(raw)} (expected {expected} bytes)")
    disp = np.frombuffer(raw, dtype="<f4", offset=12).astype(np.float64)
    disp = disp.reshape(height, width, 2)
    w = width if src_width is None else src_width
    h = height if src_height is None else src_height
    coords = np.empty_like(disp)
    xa = disp[:, :, 0] + np.arange(width, dtype=np.float64)[None, :]
    ya = disp[:, :, 1] + np.arange(height, dtype=np.float64)[:, None]
    coords[:, :, 0] = 2.0 * xa / (w - 1) - 1.0
    coords[:, :, 1] = 2.0 * ya / (h - 1) - 1.0
    return FlowField(coords)
