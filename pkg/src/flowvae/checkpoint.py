"""Binary checkpoint format for the model, optimizer state, and RNG state.

Layout: magic "FVAE", u32 version, length-prefixed canonical-JSON metadata,
u32 tensor count, then per tensor a length-prefixed name, u8 rank, u32 dims,
and raw little-endian float32 data. Everything little-endian. Files round
trip bit-exactly and are written atomically.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Optional

import numpy as np

from .model import FVAE, ModelConfig
from .optim import AdamState

MAGIC = b"FVAE"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _adam_meta(state: AdamState) -> dict:
    return {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
            "eps": state.eps, "t": state.t}


def _collect_tensors(model: FVAE, fvae_opt: Optional[AdamState],
                     mask_opt: Optional[AdamState]) -> list[tuple[str, np.ndarray]]:
    out = [(name, model.params[name].data) for name in model.param_order]
    for layer in sorted(model.running):
        out.append((f"{layer}.running_mean", model.running[layer].mean))
        out.append((f"{layer}.running_var", model.running[layer].var))
    for prefix, opt in (("opt.fvae", fvae_opt), ("opt.mask", mask_opt)):
        if opt is None:
            continue
        for pname in sorted(opt.m):
            out.append((f"{prefix}.m.{pname}", opt.m[pname]))
            out.append((f"{prefix}.v.{pname}", opt.v[pname]))
    return out


def save_checkpoint(model: FVAE, path, step: int = 0,
                    fvae_opt: Optional[AdamState] = None,
                    mask_opt: Optional[AdamState] = None,
                    rng_state: Optional[dict] = None,
                    trainer_state: Optional[dict] = None) -> None:
    meta = {
        "config": model.config.to_dict(),
        "step": step,
        "fvae_adam": _adam_meta(fvae_opt) if fvae_opt else None,
        "mask_adam": _adam_meta(mask_opt) if mask_opt else None,
        "rng": rng_state,
        "trainer": trainer_state,
    }
    blob = _canonical_json(meta)
    tensors = _collect_tensors(model, fvae_opt, mask_opt)
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", len(tensors)))
            for name, arr in tensors:
                nb = name.encode("utf-8")
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(struct.pack("<B", arr.ndim))
                for d in arr.shape:
                    f.write(struct.pack("<I", d))
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(
                f"checkpoint truncated reading {what} at byte offset {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def load_checkpoint(path) -> tuple[FVAE, dict]:
    """Rebuild the model and training state; raises before any partial model
    is constructed if the file is malformed."""
    with open(path, "rb") as f:
        raw = f.read()
    r = _Reader(raw)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r} at byte offset 0")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    meta_len = r.u32("metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint metadata: {e}") from None
    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        nlen = r.u32(f"tensor {i} name length")
        name = r.take(nlen, f"tensor {i} name").decode("utf-8")
        rank = r.u8(f"tensor {name!r} rank")
        dims = tuple(r.u32(f"tensor {name!r} dim") for _ in range(rank))
        n_elem = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(4 * n_elem, f"tensor {name!r} data"), dtype="<f4")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r} in checkpoint")
        tensors[name] = data.reshape(dims).copy()
    if r.pos != len(raw):
        raise CheckpointError(f"trailing bytes at byte offset {r.pos}")

    config = ModelConfig.from_dict(meta["config"])
    model = FVAE(config)
    for name in model.param_order:
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        arr = tensors.pop(name)
        if arr.shape != model.params[name].shape:
            raise CheckpointError(
                f"parameter {name!r} shape {arr.shape} does not match "
                f"model shape {model.params[name].shape}")
        model.params[name].tensor.data = arr
    for layer in model.running:
        for suffix, dest in (("running_mean", "mean"), ("running_var", "var")):
            key = f"{layer}.{suffix}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint missing statistics {key!r}")
            setattr(model.running[layer], dest, tensors.pop(key))

    def read_opt(prefix: str, meta_key: str) -> Optional[AdamState]:
        m = meta.get(meta_key)
        if m is None:
            return None
        opt = AdamState(lr=m["lr"], beta1=m["beta1"], beta2=m["beta2"],
                        eps=m["eps"], t=m["t"])
        for key in [k for k in tensors if k.startswith(f"{prefix}.m.")]:
            pname = key[len(prefix) + 3:]
            opt.m[pname] = tensors.pop(key)
            vkey = f"{prefix}.v.{pname}"
            if vkey not in tensors:
                raise CheckpointError(f"checkpoint missing moment {vkey!r}")
            opt.v[pname] = tensors.pop(vkey)
        return opt

    state = {
        "step": meta.get("step", 0),
        "fvae_adam": read_opt("opt.fvae", "fvae_adam"),
        "mask_adam": read_opt("opt.mask", "mask_adam"),
        "rng": meta.get("rng"),
        "trainer": meta.get("trainer"),
    }
    if tensors:
        raise CheckpointError(f"unexpected tensors in checkpoint: {sorted(tensors)[:4]}")
    return model, state
