"""Procedural synthetic-face dataset with controllable identity and
expression parameters, pairing and split logic, and preprocessing.

Faces are drawn from analytic soft-edged shapes so rendering is a
deterministic pure function of the parameters and the renderer can report
exactly which target pixels have no counterpart in a source image (the
interior of an opened mouth).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

LABELS = ("neutral", "smile", "disgust", "squint", "surprise")

_RANGES = {
    "face_radius": (0.60, 0.85),
    "eye_spacing": (0.25, 0.45),
    "eye_height": (0.15, 0.35),
    "skin_tone": (0.55, 0.90),
}

_MOUTH_Y = 0.42
_MOUTH_HALFW = 0.30
_LIP_THICK = 0.04
_MAX_CURVE = 0.24
_MAX_OPEN = 0.17
_EYE_RX = 0.105
_EYE_RY = 0.085


@dataclass(frozen=True)
class FaceParams:
    face_radius: float
    eye_spacing: float
    eye_height: float
    skin_tone: float
    expression: str = "neutral"
    intensity: float = 1.0

    def __post_init__(self):
        for name, (lo, hi) in _RANGES.items():
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside valid range [{lo}, {hi}]")
        if self.expression not in LABELS:
            raise ValueError(f"unknown expression {self.expression!r}")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity={self.intensity} outside [0, 1]")


@dataclass(frozen=True)
class Identity:
    ident: int
    face_radius: float
    eye_spacing: float
    eye_height: float
    skin_tone: float

    def params(self, label: str, intensity: float = 1.0) -> FaceParams:
        return FaceParams(self.face_radius, self.eye_spacing, self.eye_height,
                          self.skin_tone, label, intensity)


def sample_identities(count: int, rng: np.random.Generator) -> list[Identity]:
    out = []
    for i in range(count):
        out.append(Identity(
            ident=i,
            face_radius=float(rng.uniform(*_RANGES["face_radius"])),
            eye_spacing=float(rng.uniform(*_RANGES["eye_spacing"])),
            eye_height=float(rng.uniform(*_RANGES["eye_height"])),
            skin_tone=float(rng.uniform(*_RANGES["skin_tone"])),
        ))
    return out


def _grid(size: int):
    c = (np.arange(size, dtype=np.float64) + 0.5) * 2.0 / size - 1.0
    return np.meshgrid(c, c)  # x, y with y increasing downward


def _soft_ellipse(x, y, cx, cy, rx, ry, aa):
    rad = np.sqrt(((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2)
    return np.clip(0.5 + (1.0 - rad) * min(rx, ry) / aa, 0.0, 1.0)


def _soft_below(values, limit, aa):
    # coverage of the region values <= limit
    return np.clip(0.5 + (limit - values) / aa, 0.0, 1.0)


def _mouth_geometry(p: FaceParams, x):
    curve = 0.0
    opening = 0.0
    if p.expression == "smile":
        curve = -_MAX_CURVE * p.intensity
    elif p.expression == "disgust":
        curve = _MAX_CURVE * 0.8 * p.intensity
    elif p.expression == "surprise":
        opening = _MAX_OPEN * p.intensity
    env = np.sqrt(np.clip(1.0 - (x / _MOUTH_HALFW) ** 2, 0.0, None))
    center = _MOUTH_Y + curve * ((x / _MOUTH_HALFW) ** 2 - 0.5)
    return center, opening * env, env


def _eye_aperture(p: FaceParams) -> float:
    if p.expression == "squint":
        return 1.0 - 0.85 * p.intensity
    if p.expression == "surprise":
        return 1.0 + 0.7 * p.intensity
    return 1.0


def render_face(params: FaceParams, size: int, channels: int = 1) -> np.ndarray:
    """Render an anti-aliased face; returns float32 (C, H, W) in [0, 1]."""
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    x, y = _grid(size)
    aa = 3.0 / size

    head = _soft_ellipse(x, y, 0.0, 0.0, 0.80 * params.face_radius,
                         params.face_radius, aa)
    ap = _eye_aperture(params)
    eye_l = _soft_ellipse(x, y, -params.eye_spacing, -params.eye_height,
                          _EYE_RX, max(_EYE_RY * ap, 0.008), aa)
    eye_r = _soft_ellipse(x, y, params.eye_spacing, -params.eye_height,
                          _EYE_RX, max(_EYE_RY * ap, 0.008), aa)
    eyes = np.maximum(eye_l, eye_r)

    center, open_y, env = _mouth_geometry(params, x)
    dy = np.abs(y - center)
    inside_x = _soft_below(np.abs(x), _MOUTH_HALFW, aa)
    lips = _soft_below(dy, _LIP_THICK * (0.35 + 0.65 * env) + open_y, aa) * inside_x
    interior = _soft_below(dy, np.clip(open_y - _LIP_THICK, 0.0, None), aa) \
        * inside_x * (open_y > _LIP_THICK)

    def compose(bg, skin, eye_c, lip_c, teeth_c):
        img = np.full((size, size), bg, dtype=np.float64)
        img = img * (1 - head) + skin * head
        img = img * (1 - eyes) + eye_c * eyes
        img = img * (1 - lips) + lip_c * lips
        img = img * (1 - interior) + teeth_c * interior
        return img

    tone = params.skin_tone
    if channels == 1:
        return compose(0.15, tone, 0.08, 0.22, 0.95)[None].astype(np.float32)
    chans = [compose(0.10, tone, 0.08, 0.45, 0.96),
             compose(0.13, tone * 0.82, 0.07, 0.18, 0.93),
             compose(0.16, tone * 0.68, 0.07, 0.20, 0.90)]
    return np.stack(chans).astype(np.float32)


def face_regions(identity: Identity, size: int) -> dict[str, np.ndarray]:
    """Expression-independent envelope masks for the eye and mouth areas."""
    x, y = _grid(size)
    margin = 0.05
    max_ry = _EYE_RY * 1.7 + margin
    eye_l = ((x + identity.eye_spacing) / (_EYE_RX + margin)) ** 2 \
        + ((y + identity.eye_height) / max_ry) ** 2 <= 1.0
    eye_r = ((x - identity.eye_spacing) / (_EYE_RX + margin)) ** 2 \
        + ((y + identity.eye_height) / max_ry) ** 2 <= 1.0
    half_h = 0.5 * _MAX_CURVE + _LIP_THICK + _MAX_OPEN + margin
    mouth = (np.abs(x) <= _MOUTH_HALFW + margin) & (np.abs(y - _MOUTH_Y) <= half_h)
    return {"eyes": eye_l | eye_r, "mouth": mouth}


def mouth_interior_mask(params: FaceParams, size: int) -> np.ndarray:
    """Pixels showing the inside of an opened mouth (the teeth analog)."""
    x, y = _grid(size)
    aa = 3.0 / size
    center, open_y, _ = _mouth_geometry(params, x)
    dy = np.abs(y - center)
    inside_x = _soft_below(np.abs(x), _MOUTH_HALFW, aa)
    cov = _soft_below(dy, np.clip(open_y - _LIP_THICK, 0.0, None), aa) \
        * inside_x * (open_y > _LIP_THICK)
    return cov > 0.5


def occlusion_mask(source: FaceParams, target: FaceParams, size: int) -> np.ndarray:
    """Target pixels whose content does not exist in the source image."""
    return mouth_interior_mask(target, size) & ~mouth_interior_mask(source, size)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize a float image in [0, 1] to 8 bits."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def normalize(image_u8: np.ndarray) -> np.ndarray:
    """Map 8-bit values onto [-1, 1]."""
    return (np.asarray(image_u8, dtype=np.float32) / np.float32(127.5)) - np.float32(1.0)


def denormalize(image: np.ndarray) -> np.ndarray:
    """Round [-1, 1] values back to 8 bits, clamping."""
    arr = (np.asarray(image, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def color_transfer(source: np.ndarray, target: np.ndarray,
                   clamp: Optional[tuple[float, float]] = None) -> np.ndarray:
    """Match the source's per-channel mean/std to the target's."""
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.ndim != tgt.ndim or (src.ndim == 3 and src.shape[0] != tgt.shape[0]):
        raise ValueError(
            f"color_transfer channel mismatch: {src.shape} vs {tgt.shape}")
    sflat = src.reshape(src.shape[0], -1) if src.ndim == 3 else src.reshape(1, -1)
    tflat = tgt.reshape(tgt.shape[0], -1) if tgt.ndim == 3 else tgt.reshape(1, -1)
    mu_s, mu_t = sflat.mean(axis=1), tflat.mean(axis=1)
    sd_s, sd_t = sflat.std(axis=1), tflat.std(axis=1)
    out = np.empty_like(sflat)
    for c in range(sflat.shape[0]):
        if sd_s[c] < 1e-6:
            out[c] = sflat[c] - mu_s[c] + mu_t[c]
        else:
            out[c] = (sflat[c] - mu_s[c]) * (sd_t[c] / sd_s[c]) + mu_t[c]
    result = out.reshape(src.shape)
    if clamp is not None:
        result = np.clip(result, clamp[0], clamp[1])
    return result.astype(np.asarray(source).dtype, copy=False)


@dataclass
class FacePair:
    source: np.ndarray  # (C, H, W) float32 in [-1, 1], color-transferred
    target: np.ndarray  # (C, H, W) float32 in [-1, 1]
    identity: int
    source_label: str
    target_label: str


@dataclass
class FacePairSet:
    pairs: list[FacePair]

    def __len__(self) -> int:
        return len(self.pairs)

    def identities(self) -> list[int]:
        return sorted({p.identity for p in self.pairs})

    def unique_targets(self) -> list[tuple[np.ndarray, str, int]]:
        """One (image, label, identity) entry per distinct target image."""
        seen = {}
        for p in self.pairs:
            seen.setdefault((p.identity, p.target_label), (p.target, p.target_label, p.identity))
        return [seen[k] for k in sorted(seen)]


def hflip_augment(pair: FacePair, rng: np.random.Generator) -> FacePair:
    """Flip both images of a pair horizontally with probability one half."""
    if rng.random() < 0.5:
        return replace(pair,
                       source=np.ascontiguousarray(pair.source[..., ::-1]),
                       target=np.ascontiguousarray(pair.target[..., ::-1]))
    return pair


def split_identities(idents: Sequence[int], split_seed: int) -> tuple[list[int], list[int]]:
    """Deterministic identity-disjoint 80/20 split."""
    order = list(idents)
    rng = np.random.default_rng(np.random.PCG64(split_seed))
    perm = rng.permutation(len(order))
    n_train = int(0.8 * len(order))
    train = sorted(order[i] for i in perm[:n_train])
    test = sorted(order[i] for i in perm[n_train:])
    return train, test


def render_expression_images(identity: Identity, labels: Sequence[str], size: int,
                             channels: int = 1, intensity: float = 1.0) -> dict[str, np.ndarray]:
    """Render one 8-bit image per expression label."""
    out = {}
    for label in labels:
        i = 0.0 if label == "neutral" else intensity
        out[label] = to_uint8(render_face(identity.params(label, i), size, channels))
    return out


def _pairs_for(identity: Identity, images_u8: dict[str, np.ndarray],
               labels: Sequence[str]) -> list[FacePair]:
    norm = {lab: normalize(images_u8[lab]) for lab in labels}
    pairs = []
    for a in labels:
        for b in labels:
            if a == b:
                continue
            src = color_transfer(norm[a], norm[b], clamp=(-1.0, 1.0))
            pairs.append(FacePair(src.astype(np.float32), norm[b],
                                  identity.ident, a, b))
    return pairs


def build_pairs(identities: Sequence[Identity], labels: Sequence[str],
                split_seed: int, size: int, channels: int = 1,
                intensity: float = 1.0) -> tuple[FacePairSet, FacePairSet]:
    """All ordered expression pairs per identity, split 80/20 by identity."""
    if len(identities) < 5:
        raise ValueError(f"need at least 5 identities, got {len(identities)}")
    train_ids, test_ids = split_identities([i.ident for i in identities], split_seed)
    train_set, test_set = set(train_ids), set(test_ids)
    by_id = {i.ident: i for i in identities}
    train, test = [], []
    for ident in sorted(by_id):
        identity = by_id[ident]
        images = render_expression_images(identity, labels, size, channels, intensity)
        bucket = train if ident in train_set else test
        bucket.extend(_pairs_for(identity, images, labels))
    assert not (train_set & test_set)
    return FacePairSet(train), FacePairSet(test)


def write_manifest(path, rows: Sequence[tuple]) -> None:
    """One pair per line: identity, source label, target label, two paths."""
    with open(path, "w", encoding="utf-8") as f:
        for ident, src_label, tgt_label, src_path, tgt_path in rows:
            f.write(f"{ident}\t{src_label}\t{tgt_label}\t{src_path}\t{tgt_path}\n")


def read_manifest(path) -> list[tuple[int, str, str, str, str]]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"manifest line {lineno} has {len(parts)} fields, expected 5")
            rows.append((int(parts[0]), parts[1], parts[2], parts[3], parts[4]))
    return rows
