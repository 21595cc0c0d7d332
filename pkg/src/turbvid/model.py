"""Dual-field video model: a spatio-temporal deformation field plus a
canonical 2D content field.

The deformation field stores a low-rank feature volume — a spatial matrix
grid M:(Q,Gh,Gw) and a temporal vector u:(Q,T) combined per sample by
Hadamard product — and an MLP (layer-normalized) that maps the feature to a
bounded per-pixel warp and K hidden channels. The content field is a single
time-independent feature grid rendered through its own MLP; rendering a
frame samples the content grid at warp-offset coordinates and concatenates
the hidden channels before the final MLP.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad


@dataclass
class ModelConfig:
    """Desk-scale defaults. The temporal bandwidth knobs (q, k, hidden_depth)
    are deliberately tight: every extra temporal degree of freedom is spent
    by the optimizer on reproducing the observation's per-frame flicker
    instead of restoring it, and at clip lengths of 8-100 frames even a few
    channels suffice to memorize the input. Raise q/k for scenes with real
    dynamics, at the cost of weaker implicit temporal regularization.
    """

    t: int
    h: int
    w: int
    c: int = 3
    q: int = 1             # deformation feature channels (temporal rank)
    qc: int = 8            # content feature channels
    k: int = 1             # hidden channels passed to the content MLP
    grid_h: int | None = None    # content grid resolution, defaults to h x w
    grid_w: int | None = None
    deform_grid_h: int | None = None  # deformation grid; defaults to grid/4
    deform_grid_w: int | None = None
    max_disp: float = 3.0        # warp bound in pixels (tanh-scaled)
    hidden_width: int = 32
    hidden_depth: int = 1
    relu_slope: float = 0.01
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.grid_h is None:
            self.grid_h = self.h
        if self.grid_w is None:
            self.grid_w = self.w
        # turbulence tilt is spatially smooth, so the deformation field keeps a
        # much coarser grid than the content it displaces; a full-resolution
        # deformation grid hands the model per-pixel per-frame freedom, which
        # it spends memorizing the observation instead of restoring it
        if self.deform_grid_h is None:
            self.deform_grid_h = max(2, self.grid_h // 4)
        if self.deform_grid_w is None:
            self.deform_grid_w = max(2, self.grid_w // 4)
        for name in ("t", "h", "w", "c", "q", "qc", "k", "grid_h", "grid_w",
                     "deform_grid_h", "deform_grid_w", "hidden_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_depth < 0:
            raise ValueError(f"ModelConfig.hidden_depth must be >= 0, got {self.hidden_depth}")


def _uniform(rng, shape, s, dtype):
    return rng.uniform(-s, s, shape).astype(dtype)


class DualFieldModel:
    """Holds all learnable tensors plus the frame renderer.

    Parameters live in an ordered dict (name -> Tensor); the order is the
    checkpoint serialization order and the optimizer iteration order.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        cfg = config
        rng = np.random.default_rng(seed)
        p = {}

        p["d.M"] = _uniform(rng, (cfg.q, cfg.deform_grid_h, cfg.deform_grid_w),
                            1.0 / np.sqrt(cfg.q), dtype)
        p["d.u"] = _uniform(rng, (cfg.q, cfg.t), 1.0, dtype)
        din = cfg.q
        for i in range(cfg.hidden_depth):
            s = 1.0 / np.sqrt(din)
            p[f"d.mlp{i}.W"] = _uniform(rng, (din, cfg.hidden_width), s, dtype)
            p[f"d.mlp{i}.b"] = np.zeros(cfg.hidden_width, dtype=dtype)
            p[f"d.mlp{i}.gamma"] = np.ones(cfg.hidden_width, dtype=dtype)
            p[f"d.mlp{i}.beta"] = np.zeros(cfg.hidden_width, dtype=dtype)
            din = cfg.hidden_width
        # zero init: the initial warp must be exactly zero
        p["d.warp.W"] = np.zeros((din, 2), dtype=dtype)
        p["d.warp.b"] = np.zeros(2, dtype=dtype)
        p["d.hidden.W"] = _uniform(rng, (din, cfg.k), 1.0 / np.sqrt(din), dtype)
        p["d.hidden.b"] = np.zeros(cfg.k, dtype=dtype)

        p["c.grid"] = _uniform(rng, (cfg.qc, cfg.grid_h, cfg.grid_w), 1.0 / np.sqrt(cfg.qc), dtype)
        din = cfg.qc + cfg.k
        for i in range(cfg.hidden_depth):
            s = 1.0 / np.sqrt(din)
            p[f"c.mlp{i}.W"] = _uniform(rng, (din, cfg.hidden_width), s, dtype)
            p[f"c.mlp{i}.b"] = np.zeros(cfg.hidden_width, dtype=dtype)
            din = cfg.hidden_width
        p["c.out.W"] = _uniform(rng, (din, cfg.c), 1.0 / np.sqrt(din), dtype)
        p["c.out.b"] = np.zeros(cfg.c, dtype=dtype)

        self.params = {name: ad.parameter(arr, dtype=dtype) for name, arr in p.items()}
        self._pixel_coords = self._make_pixel_coords()

    def _make_pixel_coords(self):
        cfg = self.config
        xs, ys = np.meshgrid(np.arange(cfg.w), np.arange(cfg.h))
        return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(self.dtype)

    def _grid_scale(self, grid_h, grid_w):
        cfg = self.config
        sx = (grid_w - 1) / (cfg.w - 1) if cfg.w > 1 else 0.0
        sy = (grid_h - 1) / (cfg.h - 1) if cfg.h > 1 else 0.0
        return np.array([sx, sy], dtype=self.dtype)

    # -- deformation field ---------------------------------------------------

    def sample_deform_features(self, coords, t):
        """Low-rank feature lookup: bilinear sample of M times u at frame t.

        `coords` are pixel coordinates; they are mapped onto the (coarser)
        deformation grid before sampling.
        """
        cfg = self.config
        if not 0 <= t < cfg.t:
            raise IndexError(f"frame index {t} out of range [0, {cfg.t})")
        if isinstance(coords, ad.Tensor):
            coords_t = coords
        else:
            scale = self._grid_scale(cfg.deform_grid_h, cfg.deform_grid_w)
            coords_t = ad.constant(np.asarray(coords, dtype=self.dtype) * scale)
        m = ad.bilinear_sample(self.params["d.M"], coords_t)
        u_t = ad.take_column(self.params["d.u"], t)
        return ad.hadamard(m, u_t)

    def predict_warp_hidden(self, coords, t):
        """MLP over the deformation features, split into warp and hidden heads.

        Returns (warp: N x 2 in pixels, bounded by max_disp; hidden: N x K).
        """
        cfg = self.config
        h = self.sample_deform_features(coords, t)
        for i in range(cfg.hidden_depth):
            h = ad.linear(h, self.params[f"d.mlp{i}.W"], self.params[f"d.mlp{i}.b"])
            h = ad.layer_norm(h, self.params[f"d.mlp{i}.gamma"], self.params[f"d.mlp{i}.beta"],
                              eps=cfg.ln_eps)
            h = ad.leaky_relu(h, cfg.relu_slope)
        warp = ad.scale(ad.tanh(ad.linear(h, self.params["d.warp.W"], self.params["d.warp.b"])),
                        cfg.max_disp)
        hidden = ad.linear(h, self.params["d.hidden.W"], self.params["d.hidden.b"])
        return warp, hidden

    # -- rendering -----------------------------------------------------------

    def render_frame(self, t, with_warp=False):
        """Render frame t as an (H,W,C) tensor in [0,1], differentiable
        through every parameter group.

        Hidden channels are evaluated at the unwarped pixel coordinates; the
        warp offsets only the content-grid sampling (backward warping).
        """
        cfg = self.config
        if not 0 <= t < cfg.t:
            raise IndexError(f"frame index {t} out of range [0, {cfg.t})")
        base = ad.constant(self._pixel_coords)
        warp, hidden = self.predict_warp_hidden(self._pixel_coords, t)
        warped_px = ad.add(base, warp)
        scale = self._grid_scale(cfg.grid_h, cfg.grid_w)
        content_coords = ad.hadamard(warped_px, ad.constant(scale)) \
            if not np.all(scale == 1.0) else warped_px
        feats = ad.bilinear_sample(self.params["c.grid"], content_coords)
        z = ad.concat(feats, hidden)
        for i in range(cfg.hidden_depth):
            z = ad.linear(z, self.params[f"c.mlp{i}.W"], self.params[f"c.mlp{i}.b"])
            z = ad.leaky_relu(z, cfg.relu_slope)
        rgb = ad.sigmoid(ad.linear(z, self.params["c.out.W"], self.params["c.out.b"]))
        frame = ad.reshape(rgb, (cfg.h, cfg.w, cfg.c))
        if with_warp:
            return frame, warp
        return frame

    def render_video(self):
        """Forward-only render of all frames, stacked (T,H,W,C) float32."""
        cfg = self.config
        out = np.empty((cfg.t, cfg.h, cfg.w, cfg.c), dtype=np.float32)
        for t in range(cfg.t):
            out[t] = self.render_frame(t).data.astype(np.float32)
        return out

    # -- bookkeeping ----------------------------------------------------------

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def param_arrays(self):
        return {name: p.data for name, p in self.params.items()}

    def astype(self, dtype):
        """Copy of this model with all parameters cast to `dtype`."""
        clone = DualFieldModel.__new__(DualFieldModel)
        clone.config = self.config
        clone.dtype = dtype
        clone.params = {name: ad.parameter(p.data.astype(dtype), dtype=dtype)
                        for name, p in self.params.items()}
        clone._pixel_coords = clone._make_pixel_coords()
        return clone


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> DualFieldModel:
    return DualFieldModel(config, seed=seed, dtype=dtype)


def param_count(config: ModelConfig):
    """Deformation feature-volume parameter counts:
    (low-rank actual Q*(Gh*Gw + T), full-rank equivalent Q*Gh*Gw*T)."""
    cfg = config
    gh, gw = cfg.deform_grid_h, cfg.deform_grid_w
    lowrank = cfg.q * (gh * gw + cfg.t)
    fullrank = cfg.q * gh * gw * cfg.t
    return lowrank, fullrank


# ---------------------------------------------------------------------------
# checkpoints: magic "CVRT", version u32, config JSON block, raw f32 tensors
# ---------------------------------------------------------------------------

_MAGIC = b"CVRT"
_VERSION = 1


def save_checkpoint(model: DualFieldModel, path):
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    cfg_bytes = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        buf.write(arr.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> DualFieldModel:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"not a model checkpoint: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", raw, 8)
    cfg = ModelConfig(**json.loads(raw[12:12 + cfg_len].decode("utf-8")))
    model = DualFieldModel(cfg, seed=0)
    off = 12 + cfg_len
    for name, p in model.params.items():
        n = p.data.size
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(p.data.shape)
        p.data = arr.copy()
        off += 4 * n
    if off != len(raw):
        raise ValueError(f"checkpoint has {len(raw) - off} trailing bytes")
    return model
