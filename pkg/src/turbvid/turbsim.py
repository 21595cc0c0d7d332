"""Parametric turbulence degradation with ground truth.

Tilt fields are spatially smoothed white noise rescaled to an exact RMS,
chained over time by an AR(1) process; degradation backward-warps each clean
frame by its tilt field and then blurs. Deliberately depth-unaware (every
pixel draws from the same statistics) — adequate for flat desk-scale scenes,
wrong for scenes with strong depth variation, like any purely 2D tilt model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

DEFAULT_STRENGTH = 1.5       # RMS tilt, pixels
DEFAULT_SMOOTH_SIGMA = 8.0   # spatial correlation of tilt, pixels
DEFAULT_TEMPORAL_CORR = 0.7  # AR(1) coefficient; at 0.9 successive tilts are so
                             # alike that a 16-frame clip cannot average them out
DEFAULT_BLUR_SIGMA = 1.0     # pixels


@dataclass
class TurbulenceParams:
    strength: float = DEFAULT_STRENGTH
    smooth_sigma: float = DEFAULT_SMOOTH_SIGMA
    temporal_corr: float = DEFAULT_TEMPORAL_CORR
    blur_sigma: float = DEFAULT_BLUR_SIGMA
    seed: int = 0

    def __post_init__(self):
        if self.strength < 0:
            raise ValueError("strength must be >= 0")
        if not 0.0 <= self.temporal_corr <= 1.0:
            raise ValueError("temporal_corr must be in [0, 1]")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")


@dataclass
class GroundTruthPack:
    clean: np.ndarray      # (T,H,W,C)
    degraded: np.ndarray   # (T,H,W,C)
    tilts: np.ndarray      # (T,2,H,W) pixel offsets, [0]=dx, [1]=dy


def _innovation(rng, h, w, smooth_sigma, strength):
    """One spatially smooth field (2,H,W) with exact RMS = strength."""
    field = rng.standard_normal((2, h, w))
    if smooth_sigma > 0:
        field = np.stack([gaussian_filter(f, smooth_sigma, mode="reflect") for f in field])
    rms = np.sqrt(np.mean(field * field))
    if rms == 0.0:
        return field
    return field * (strength / rms)


def gen_tilt_fields(params: TurbulenceParams, t: int, h: int, w: int) -> np.ndarray:
    """(T,2,H,W) tilt fields: smoothed, RMS-calibrated, AR(1)-chained."""
    if params.strength == 0.0:
        return np.zeros((t, 2, h, w), dtype=np.float32)
    rng = np.random.default_rng(params.seed)
    c = params.temporal_corr
    out = np.empty((t, 2, h, w), dtype=np.float64)
    out[0] = _innovation(rng, h, w, params.smooth_sigma, params.strength)
    mix = np.sqrt(1.0 - c * c)
    for i in range(1, t):
        innov = _innovation(rng, h, w, params.smooth_sigma, params.strength)
        out[i] = c * out[i - 1] + mix * innov
    return out.astype(np.float32)


def warp_frame(frame: np.ndarray, tilt: np.ndarray) -> np.ndarray:
    """Backward-warp (H,W,C) by tilt (2,H,W): out(x,y) = frame(x+dx, y+dy),
    bilinear with border clamping."""
    h, w = frame.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    sx = np.clip(xs + tilt[0], 0.0, w - 1.0)
    sy = np.clip(ys + tilt[1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(sx).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    f = frame
    return ((f[y0, x0] * (1 - fx) + f[y0, x1] * fx) * (1 - fy)
            + (f[y1, x0] * (1 - fx) + f[y1, x1] * fx) * fy)


def apply_degradation(clean: np.ndarray, tilts: np.ndarray, blur_sigma: float) -> np.ndarray:
    """Warp + blur + clamp, frame by frame; reapplying stored tilts is exact."""
    out = np.empty_like(clean, dtype=np.float32)
    for t in range(clean.shape[0]):
        frame = warp_frame(clean[t].astype(np.float64), tilts[t].astype(np.float64))
        if blur_sigma > 0:
            frame = np.stack([gaussian_filter(frame[..., ch], blur_sigma, mode="nearest")
                              for ch in range(frame.shape[-1])], axis=-1)
        out[t] = np.clip(frame, 0.0, 1.0).astype(np.float32)
    return out


def degrade(clean: np.ndarray, params: TurbulenceParams) -> GroundTruthPack:
    """Degrade a clean (T,H,W,C) volume; everything needed to reproduce the
    degradation bit-exactly is stored in the returned pack."""
    clean = np.asarray(clean, dtype=np.float32)
    t, h, w, _ = clean.shape
    tilts = gen_tilt_fields(params, t, h, w)
    degraded = apply_degradation(clean, tilts, params.blur_sigma)
    return GroundTruthPack(clean=clean, degraded=degraded, tilts=tilts)


# ---------------------------------------------------------------------------
# synthetic clean scenes (test content with trackable corners)
# ---------------------------------------------------------------------------


def synthetic_scene(t: int, h: int, w: int, c: int = 3, kind: str = "static",
                    seed: int = 0, drift: tuple = (1, 0)) -> np.ndarray:
    """A clean (T,H,W,C) volume: smooth random texture plus high-contrast
    square patches (good corner features). kind="static" repeats one frame;
    kind="drift" scrolls it by `drift` pixels per frame (periodic)."""
    rng = np.random.default_rng(seed)
    base = gaussian_filter(rng.uniform(0, 1, (h, w)), 2.5, mode="wrap")
    lo, hi = base.min(), base.max()
    base = 0.15 + 0.6 * (base - lo) / max(hi - lo, 1e-9)

    step = max(8, min(h, w) // 6)
    half = max(2, step // 4)
    for cy in range(step // 2, h - half, step):
        for cx in range(step // 2, w - half, step):
            val = 0.92 if rng.uniform() > 0.5 else 0.08
            base[cy - half:cy + half, cx - half:cx + half] = val

    if c == 3:
        tint = np.array([1.0, 0.95, 0.9])
        frame0 = np.clip(base[..., None] * tint[None, None, :], 0, 1)
    else:
        frame0 = base[..., None]

    frames = np.empty((t, h, w, c), dtype=np.float32)
    for i in range(t):
        if kind == "drift":
            frames[i] = np.roll(frame0, (i * drift[1], i * drift[0]), axis=(0, 1))
        elif kind == "static":
            frames[i] = frame0
        else:
            raise ValueError(f"unknown scene kind {kind!r}")
    return frames


def periodic_pattern(h: int, w: int, c: int = 3) -> np.ndarray:
    """Smooth periodic single frame (H,W,C); np.roll-comparable."""
    ys, xs = np.mgrid[0:h, 0:w]
    v = 0.5 + 0.25 * np.sin(2 * np.pi * xs * 3 / w) + 0.2 * np.cos(2 * np.pi * ys * 2 / h)
    v = np.clip(v, 0, 1)
    return np.repeat(v[..., None], c, axis=-1).astype(np.float32)
