"""Adam-based test-time optimization loop.

Each iteration renders a deterministic round-robin batch of frames,
accumulates the objective's gradients (averaged over the batch so loss
weights keep their meaning at any batch size), and applies one bias-corrected
Adam step. Divergence (any NaN component or parameter) aborts with a
diagnostic naming the offending term and iteration.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .losses import LossBreakdown, LossWeights, total_loss
from .model import ModelConfig, init_model

LOG_COLUMNS = ("iter", "total", "mse", "ssim", "lpips", "temp", "text", "ms_elapsed")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 6000
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    frames_per_step: int = 4
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0   # 0 disables periodic checkpoints
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.frames_per_step < 1:
            raise ValueError("frames_per_step must be >= 1")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)


@dataclass
class LogRecord:
    iteration: int
    breakdown: LossBreakdown
    ms_elapsed: float


class TrainLog:
    def __init__(self):
        self.records: list[LogRecord] = []

    def append(self, iteration, breakdown, ms_elapsed):
        if self.records and iteration <= self.records[-1].iteration:
            raise ValueError("log iterations must be strictly increasing")
        self.records.append(LogRecord(iteration, breakdown, ms_elapsed))

    def totals(self):
        return [r.breakdown.total for r in self.records]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(LOG_COLUMNS)
            for r in self.records:
                b = r.breakdown
                writer.writerow([r.iteration, b.total, b.mse, b.ssim, b.lpips, b.temp,
                                 b.text, f"{r.ms_elapsed:.1f}"])


class AdamState:
    def __init__(self, params):
        self.step = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params, grads, state: AdamState, config: TrainConfig):
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape "
                             f"{p.data.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
    return state


def _frame_batch(iteration, frames_per_step, t_total):
    start = iteration * frames_per_step
    return [(start + j) % t_total for j in range(frames_per_step)]


def _disparity_for(disparity, t, h, w):
    if disparity is None:
        return np.full((h, w), 0.5, dtype=np.float32)
    d = np.asarray(disparity)
    d = d[t] if d.ndim == 3 else d
    if d.shape != (h, w):
        raise ValueError(f"disparity shape {d.shape} does not match frames {h}x{w}")
    return np.clip(d, 0.0, 1.0)


def _mean_breakdown(parts):
    n = len(parts)
    out = LossBreakdown()
    for name in ("total", "mse", "ssim", "lpips", "temp", "text"):
        setattr(out, name, sum(getattr(p, name) for p in parts) / n)
    return out


def train(observed, supervision, disparity=None, model_config=None,
          train_config=None, oracles=None, checkpoint_dir=None, on_step=None):
    """Fit the dual-field model to `supervision` frames.

    observed/supervision: (T,H,W,C) float arrays with matching shapes
    (observed fixes the model dimensions; supervision provides the target
    frames — commonly the observed video itself, a registered average, or an
    externally restored sequence). Returns (model, TrainLog).
    """
    observed = np.asarray(observed, dtype=np.float32)
    supervision = np.asarray(supervision, dtype=np.float32)
    if observed.shape != supervision.shape:
        raise ValueError(f"supervision shape {supervision.shape} != observed {observed.shape}")
    t_total, h, w, c = observed.shape
    cfg = train_config or TrainConfig()
    if model_config is None:
        model_config = ModelConfig(t=t_total, h=h, w=w, c=c)
    model = init_model(model_config, seed=cfg.seed)
    log = TrainLog()
    if cfg.iterations == 0:
        return model, log

    state = AdamState(model.params)
    fps = min(cfg.frames_per_step, t_total)
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        batch = _frame_batch(it, fps, t_total)
        model.zero_grads()
        parts = []
        for t in batch:
            node, br = total_loss(model, t, supervision[t],
                                  _disparity_for(disparity, t, h, w), cfg.weights, oracles)
            node.backward()
            parts.append(br)
        grads = {name: (p.grad / fps if p.grad is not None else None)
                 for name, p in model.params.items()}
        adam_step(model.params, grads, state, cfg)

        br = _mean_breakdown(parts)
        for term in ("mse", "ssim", "lpips", "temp", "text", "total"):
            value = getattr(br, term)
            if math.isnan(value) or math.isinf(value):
                raise TrainingDiverged(
                    f"iteration {it}: loss term '{term}' is {value}; aborting")
        last = it == cfg.iterations - 1
        if it % cfg.log_every == 0 or last:
            ms = (time.perf_counter() - t0) * 1e3
            log.append(it, br, ms)
            for name, p in model.params.items():
                if not np.all(np.isfinite(p.data)):
                    raise TrainingDiverged(
                        f"iteration {it}: parameter '{name}' became non-finite")
        if checkpoint_dir is not None and cfg.checkpoint_every \
                and (it + 1) % cfg.checkpoint_every == 0:
            from .model import save_checkpoint
            save_checkpoint(model, f"{checkpoint_dir}/ckpt_{it + 1:06d}.cvrt")
        if on_step is not None:
            on_step(it, model, br)
    return model, log


def restore(observed, supervision=None, disparity=None, model_config=None,
            train_config=None, oracles=None, enhance=None):
    """Train on the sequence and render the fitted model; the rendered video
    (turbulence absorbed into the warp, content shared across time) is the
    restoration. `enhance` is an optional per-frame hook, identity when None.
    """
    observed = np.asarray(observed, dtype=np.float32)
    if supervision is None:
        supervision = observed
    model, log = train(observed, supervision, disparity=disparity,
                       model_config=model_config, train_config=train_config,
                       oracles=oracles)
    video = model.render_video()
    if enhance is not None:
        video = np.stack([np.clip(enhance(f), 0.0, 1.0) for f in video]).astype(np.float32)
    return video, model, log
