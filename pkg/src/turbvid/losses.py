"""Training objectives: pixel similarity (MSE + SSIM + oracle perceptual),
warp sparsity weighted by disparity, and oracle semantic guidance.

The total is total = mse*w_mse + ssim*w_ssim + lpips*w_lpips
                   + temp*w_temp + text*w_text,
reported as a LossBreakdown whose `total` is the exact float64 weighted sum
of the components. Oracle-backed terms (lpips, text) enter the graph as
opaque scalars with externally supplied pixel gradients; when no oracle is
attached (or the oracle died), their weights are treated as zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .oracle import OracleUnavailable

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

_SSIM_KERNEL = ad.gaussian_kernel1d(SSIM_SIGMA, SSIM_WINDOW // 2)


@dataclass
class LossWeights:
    mse: float = 1.0
    ssim: float = 0.2
    lpips: float = 0.5
    temp: float = 0.05
    text: float = 0.01

    def __post_init__(self):
        for name in ("mse", "ssim", "lpips", "temp", "text"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class LossBreakdown:
    total: float = 0.0
    mse: float = 0.0
    ssim: float = 0.0
    lpips: float = 0.0
    temp: float = 0.0
    text: float = 0.0

    def values(self):
        return {"total": self.total, "mse": self.mse, "ssim": self.ssim,
                "lpips": self.lpips, "temp": self.temp, "text": self.text}


def mse_loss(pred, target):
    """Mean squared error over all pixels/channels."""
    target = _const_like(pred, target)
    if pred.data.shape != target.data.shape:
        raise ad.ShapeError(f"mse: shape mismatch {pred.data.shape} vs {target.data.shape}")
    return ad.reduce_mean(ad.square(ad.sub(pred, target)))


def ssim_loss(pred, target):
    """1 - mean SSIM, 11x11 Gaussian window (sigma 1.5), unit dynamic range.

    Differentiable. Windowed statistics use zero padding, which makes the
    filtering self-adjoint; SSIM(x, x) is exactly 1 regardless of padding.
    """
    target = _const_like(pred, target)
    if pred.data.shape != target.data.shape:
        raise ad.ShapeError(f"ssim: shape mismatch {pred.data.shape} vs {target.data.shape}")
    h, w = pred.data.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"ssim needs frames >= {SSIM_WINDOW}px, got {h}x{w}")
    k = _SSIM_KERNEL
    mu_x = ad.gauss_blur2d(pred, k)
    mu_y = ad.gauss_blur2d(target, k)
    mu_xx = ad.square(mu_x)
    mu_yy = ad.square(mu_y)
    mu_xy = ad.hadamard(mu_x, mu_y)
    var_x = ad.sub(ad.gauss_blur2d(ad.square(pred), k), mu_xx)
    var_y = ad.sub(ad.gauss_blur2d(ad.square(target), k), mu_yy)
    cov = ad.sub(ad.gauss_blur2d(ad.hadamard(pred, target), k), mu_xy)
    num = ad.hadamard(ad.add_const(ad.scale(mu_xy, 2.0), SSIM_C1),
                      ad.add_const(ad.scale(cov, 2.0), SSIM_C2))
    den = ad.hadamard(ad.add_const(ad.add(mu_xx, mu_yy), SSIM_C1),
                      ad.add_const(ad.add(var_x, var_y), SSIM_C2))
    ssim_map = ad.divide(num, den)
    return ad.sub(ad.constant(np.ones((), dtype=pred.data.dtype)), ad.reduce_mean(ssim_map))


def temporal_loss(warp, disparity):
    """Disparity-weighted L1 of the warp: mean over pixels of
    (1 - d) * (|dx| + |dy|). Far pixels (low disparity) are penalized most."""
    warp_t = warp if isinstance(warp, ad.Tensor) else ad.constant(warp)
    d = np.asarray(disparity, dtype=warp_t.data.dtype).reshape(-1)
    n = warp_t.data.shape[0] if warp_t.data.ndim == 2 else warp_t.data.size // 2
    flat = ad.reshape(warp_t, (n, 2))
    if d.size != n:
        raise ad.ShapeError(f"temporal: disparity has {d.size} pixels, warp has {n}")
    weight = ad.constant(np.repeat((1.0 - d)[:, None], 2, axis=1).astype(warp_t.data.dtype))
    return ad.scale(ad.reduce_sum(ad.hadamard(weight, ad.absolute(flat))), 1.0 / n)


def semantic_loss(frame, oracle, prompt_pos, prompt_neg):
    """Prompt-contrast loss from the oracle: value plus pixel gradient,
    attached to the graph as an opaque scalar. Returns None if the oracle is
    unavailable (the term is then dropped by the caller)."""
    value, grad = oracle.semantic_eval(np.ascontiguousarray(frame.data), prompt_pos, prompt_neg)
    return ad.external_scalar(frame, value, grad)


def perceptual_loss(frame, reference, oracle):
    """Reference-based perceptual distance from the oracle, same contract as
    semantic_loss."""
    value, grad = oracle.perceptual_eval(np.ascontiguousarray(frame.data),
                                         np.ascontiguousarray(reference, dtype=frame.data.dtype))
    return ad.external_scalar(frame, value, grad)


def total_loss(model, t, supervision_frame, disparity, weights: LossWeights, oracles=None):
    """Render frame t and assemble the weighted objective.

    Returns (scalar graph node for backward, LossBreakdown). Oracle failures
    disable the affected term for this and future calls, with a warning; they
    never abort.
    """
    frame, warp = model.render_frame(t, with_warp=True)
    terms = []
    br = LossBreakdown()

    if weights.mse > 0:
        node = mse_loss(frame, supervision_frame)
        br.mse = node.item()
        terms.append((weights.mse, node))
    if weights.ssim > 0:
        node = ssim_loss(frame, supervision_frame)
        br.ssim = node.item()
        terms.append((weights.ssim, node))
    if weights.temp > 0:
        node = temporal_loss(warp, disparity)
        br.temp = node.item()
        terms.append((weights.temp, node))

    if oracles is not None:
        if weights.lpips > 0 and oracles.has_perceptual:
            try:
                node = perceptual_loss(frame, supervision_frame, oracles.perceptual)
                br.lpips = node.item()
                terms.append((weights.lpips, node))
            except OracleUnavailable as e:
                log.warning("perceptual oracle lost (%s); continuing with lpips weight 0", e)
        if weights.text > 0 and oracles.has_semantic:
            try:
                node = semantic_loss(frame, oracles.semantic,
                                     oracles.prompt_pos, oracles.prompt_neg)
                br.text = node.item()
                terms.append((weights.text, node))
            except OracleUnavailable as e:
                log.warning("semantic oracle lost (%s); continuing with text weight 0", e)

    if not terms:
        total_node = ad.reduce_mean(ad.scale(frame, 0.0))
    else:
        total_node = ad.scale(terms[0][1], terms[0][0])
        for lam, node in terms[1:]:
            total_node = ad.add(total_node, ad.scale(node, lam))

    br.total = (weights.mse * br.mse + weights.ssim * br.ssim + weights.lpips * br.lpips
                + weights.temp * br.temp + weights.text * br.text)
    return total_node, br


def _const_like(pred, target):
    if isinstance(target, ad.Tensor):
        return target
    return ad.constant(np.asarray(target, dtype=pred.data.dtype))
