"""Classical-CV temporal consistency measurements: dense pyramidal
Lucas-Kanade flow, forward-backward occlusion masks, flow-compensated warp
error, KLT point trajectories, x-t slices, and total-variation-of-flow
statistics.

Everything here is self-contained numpy/scipy; reported numbers are
comparable within this toolkit, not across implementations that use other
flow estimators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter, zoom

from .quality import psnr

DEFAULT_LEVELS = 3
DEFAULT_WINDOW = 21
DEFAULT_ITERS = 30

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def to_gray(frame):
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    if frame.shape[-1] == 1:
        return frame[..., 0]
    return frame[..., :3] @ GRAY_WEIGHTS


def _downsample(img):
    # anti-alias before decimating; light smoothing leaves subpixel texture
    # that flips gradient signs at coarse levels and derails the solve
    return gaussian_filter(img, 1.5, mode="nearest")[::2, ::2]


def _pyramid(img, levels):
    pyr = [img]
    for _ in range(levels - 1):
        if min(pyr[-1].shape) < 8:
            break
        pyr.append(_downsample(pyr[-1]))
    return pyr


def _bilinear_at(img, xs, ys):
    h, w = img.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    return ((img[y0, x0] * (1 - fx) + img[y0, x1] * fx) * (1 - fy)
            + (img[y1, x0] * (1 - fx) + img[y1, x1] * fx) * fy)


def warp_by_flow(img, flow, return_mask=False):
    """Backward-warp: out(x) = img(x + flow(x)). img may be (H,W) or (H,W,C).

    With return_mask, also returns 1.0 where the sample position stayed on
    the image, 0.0 where it was clamped to the border.
    """
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    sx = xs + flow[..., 0]
    sy = ys + flow[..., 1]
    if img.ndim == 2:
        out = _bilinear_at(img, sx, sy)
    else:
        out = np.stack([_bilinear_at(img[..., c], sx, sy) for c in range(img.shape[-1])],
                       axis=-1)
    if not return_mask:
        return out
    inside = ((sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)).astype(np.float64)
    return out, inside


def _lk_refine(f1, f2, flow, window, iters, presmooth=0.75):
    """Iterative LK at one pyramid level (template gradients, masked windows).

    Three stability measures, each load-bearing:
    - normal equations are weighted by sample validity, so pixels whose warp
      left the frame contribute nothing (otherwise border error diffuses one
      window radius per iteration and corrupts the whole field);
    - both images are lightly presmoothed for the solve, shrinking the
      phantom residual between the interpolation-blurred warp and the
      untouched template;
    - iteration stops when the update magnitude stops shrinking: past the
      noise floor the update feedback amplifies instead of contracting.
    """
    reg = 1e-6
    if presmooth > 0:
        f1 = gaussian_filter(f1, presmooth, mode="nearest")
        f2 = gaussian_filter(f2, presmooth, mode="nearest")
    gy, gx = np.gradient(f1)
    prev_step = np.inf
    best = flow
    for _ in range(iters):
        warped, wgt = warp_by_flow(f2, flow, return_mask=True)
        it = warped - f1
        norm = uniform_filter(wgt, window, mode="constant")
        valid = norm > 0.25  # at least a quarter of the window is usable
        norm = np.where(valid, norm, 1.0)

        def wsum(z):
            return uniform_filter(z * wgt, window, mode="constant") / norm

        a11 = wsum(gx * gx) + reg
        a12 = wsum(gx * gy)
        a22 = wsum(gy * gy) + reg
        b1 = wsum(gx * it)
        b2 = wsum(gy * it)
        det = a11 * a22 - a12 * a12
        textured = valid & (det > 1e-9)
        inv_det = np.where(textured, 1.0 / np.where(textured, det, 1.0), 0.0)
        du = -(a22 * b1 - a12 * b2) * inv_det
        dv = -(a11 * b2 - a12 * b1) * inv_det
        # cap per-iteration updates; LK linearization is local
        np.clip(du, -1.0, 1.0, out=du)
        np.clip(dv, -1.0, 1.0, out=dv)
        step = float(np.hypot(du, dv).max())
        if step >= prev_step:
            break
        flow = flow + np.stack([du, dv], axis=-1)
        best = flow
        prev_step = step
        if step < 1e-3:
            break
    return best


def lk_flow(f1, f2, levels=DEFAULT_LEVELS, window=DEFAULT_WINDOW, iters=DEFAULT_ITERS):
    """Dense coarse-to-fine Lucas-Kanade flow from grayscale f1 to f2, (H,W,2).

    Constant (textureless) inputs produce zero flow rather than failing.
    """
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape:
        raise ValueError(f"frame shapes differ: {f1.shape} vs {f2.shape}")
    if f1.ndim != 2:
        raise ValueError("lk_flow expects grayscale frames; use to_gray first")
    if window % 2 == 0:
        raise ValueError("window must be odd")
    p1 = _pyramid(f1, levels)
    p2 = _pyramid(f2, levels)
    flow = np.zeros(p1[-1].shape + (2,), dtype=np.float64)
    for lvl in range(len(p1) - 1, -1, -1):
        if lvl < len(p1) - 1:
            th, tw = p1[lvl].shape
            fh, fw = flow.shape[:2]
            flow = np.stack(
                [zoom(flow[..., i], (th / fh, tw / fw), order=1, mode="nearest",
                      grid_mode=True) for i in range(2)], axis=-1) * 2.0
        flow = _lk_refine(p1[lvl], p2[lvl], flow, window, iters)
    return flow


def occlusion_mask(fwd, bwd):
    """Forward-backward consistency mask: 1 where flow round-trip is
    consistent, 0 where compensation is unreliable.

    valid iff |w_f + w_b(x + w_f)|^2 < 0.01*(|w_f|^2 + |w_b(x + w_f)|^2) + 0.5
    """
    fwd = np.asarray(fwd, dtype=np.float64)
    bwd = np.asarray(bwd, dtype=np.float64)
    if fwd.shape != bwd.shape:
        raise ValueError(f"flow shapes differ: {fwd.shape} vs {bwd.shape}")
    bwd_at = warp_by_flow(bwd, fwd)
    resid = np.sum((fwd + bwd_at) ** 2, axis=-1)
    bound = 0.01 * (np.sum(fwd ** 2, axis=-1) + np.sum(bwd_at ** 2, axis=-1)) + 0.5
    return (resid < bound).astype(np.uint8)


def warp_error_pair(v_t, v_t1, flow, mask):
    """Occlusion-masked mean squared difference between frame t and
    flow-compensated frame t+1. Returns None for fully occluded pairs
    (callers drop them from averages)."""
    total = float(mask.sum())
    if total == 0.0:
        return None
    warped = warp_by_flow(np.asarray(v_t1, dtype=np.float64), flow)
    diff = np.asarray(v_t, dtype=np.float64) - warped
    per_pixel = np.sum(diff * diff, axis=-1)
    return float((per_pixel * mask).sum() / total)


def warp_error_video(video, levels=DEFAULT_LEVELS, window=DEFAULT_WINDOW,
                     iters=DEFAULT_ITERS):
    """Average flow-compensated consecutive-frame error over the sequence."""
    video = np.asarray(video)
    if video.shape[0] < 2:
        raise ValueError("warp error needs at least two frames")
    grays = [to_gray(f) for f in video]
    errors = []
    for t in range(video.shape[0] - 1):
        fwd = lk_flow(grays[t], grays[t + 1], levels, window, iters)
        bwd = lk_flow(grays[t + 1], grays[t], levels, window, iters)
        mask = occlusion_mask(fwd, bwd)
        err = warp_error_pair(video[t], video[t + 1], fwd, mask)
        if err is not None:
            errors.append(err)
    if not errors:
        raise ValueError("every frame pair was fully occluded")
    return float(np.mean(errors))


# ---------------------------------------------------------------------------
# sparse tracking
# ---------------------------------------------------------------------------


@dataclass
class Track:
    start_frame: int
    points: list = field(default_factory=list)  # (x, y) per tracked frame
    alive: bool = True

    def path_length(self):
        p = np.asarray(self.points)
        if len(p) < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))


@dataclass
class TrackSet:
    tracks: list = field(default_factory=list)

    def surviving(self):
        return [t for t in self.tracks if t.alive]

    def __len__(self):
        return len(self.tracks)


def shi_tomasi_corners(gray, max_corners=200, quality_level=0.01, min_distance=8):
    """Min-eigenvalue corner response with greedy distance suppression.
    Returns (N,2) float (x, y), strongest first."""
    gray = np.asarray(gray, dtype=np.float64)
    gy, gx = np.gradient(gray)
    sxx = gaussian_filter(gx * gx, 1.5, mode="nearest")
    sxy = gaussian_filter(gx * gy, 1.5, mode="nearest")
    syy = gaussian_filter(gy * gy, 1.5, mode="nearest")
    trace = sxx + syy
    sq = np.sqrt((sxx - syy) ** 2 + 4.0 * sxy * sxy)
    response = 0.5 * (trace - sq)
    margin = 4
    h, w = gray.shape
    if h <= 2 * margin or w <= 2 * margin:
        return np.zeros((0, 2))
    response[:margin] = response[-margin:] = 0
    response[:, :margin] = response[:, -margin:] = 0
    peak = response.max()
    if peak <= 0:
        return np.zeros((0, 2))
    threshold = quality_level * peak
    ys, xs = np.nonzero(response >= threshold)
    order = np.argsort(response[ys, xs], kind="stable")[::-1]
    chosen = []
    taken = np.zeros((h, w), dtype=bool)
    r = int(min_distance)
    for idx in order:
        y, x = int(ys[idx]), int(xs[idx])
        if taken[y, x]:
            continue
        chosen.append((float(x), float(y)))
        if len(chosen) >= max_corners:
            break
        y0, y1 = max(0, y - r), min(h, y + r + 1)
        x0, x1 = max(0, x - r), min(w, x + r + 1)
        taken[y0:y1, x0:x1] = True
    return np.asarray(chosen, dtype=np.float64).reshape(-1, 2)


def _patch(img, cx, cy, half):
    ys = cy + np.arange(-half, half + 1)[:, None]
    xs = cx + np.arange(-half, half + 1)[None, :]
    return _bilinear_at(img, np.broadcast_to(xs, (2 * half + 1, 2 * half + 1)),
                        np.broadcast_to(ys, (2 * half + 1, 2 * half + 1)))


def track_point_lk(p1_gray_pyr, p2_gray_pyr, point, window=15, iters=12):
    """Pyramidal LK for one point; returns new (x, y) or None if lost."""
    half = window // 2
    levels = len(p1_gray_pyr)
    d = np.zeros(2)
    for lvl in range(levels - 1, -1, -1):
        scale = 2.0 ** lvl
        img1, img2 = p1_gray_pyr[lvl], p2_gray_pyr[lvl]
        h, w = img1.shape
        px, py = point[0] / scale, point[1] / scale
        if not (half <= px <= w - 1 - half and half <= py <= h - 1 - half):
            if lvl == 0:
                return None
            d *= 2.0
            continue
        tpl = _patch(img1, px, py, half)
        gy, gx = np.gradient(tpl)
        g11 = float(np.sum(gx * gx)) + 1e-9
        g12 = float(np.sum(gx * gy))
        g22 = float(np.sum(gy * gy)) + 1e-9
        det = g11 * g22 - g12 * g12
        if det < 1e-12:
            return None
        prev_step = np.inf
        for _ in range(iters):
            qx, qy = px + d[0], py + d[1]
            if not (0 <= qx <= w - 1 and 0 <= qy <= h - 1):
                return None
            err = _patch(img2, qx, qy, half) - tpl
            b1 = float(np.sum(gx * err))
            b2 = float(np.sum(gy * err))
            dx = -(g22 * b1 - g12 * b2) / det
            dy = -(g11 * b2 - g12 * b1) / det
            step = dx * dx + dy * dy
            if step >= prev_step:  # noise floor; keep the previous estimate
                break
            d += (dx, dy)
            prev_step = step
            if step < 1e-8:
                break
        if lvl > 0:
            d *= 2.0
    new = (point[0] + d[0], point[1] + d[1])
    return new


def klt_track(video, max_corners=200, quality_level=0.01, min_distance=8,
              fb_threshold=1.0, window=15, levels=3):
    """Seed corners on frame 0 and track them through the sequence.

    A track dies when LK loses it, it leaves the frame, or the
    forward-backward residual exceeds fb_threshold; dead tracks never revive.
    """
    video = np.asarray(video)
    grays = [to_gray(f) for f in video]
    corners = shi_tomasi_corners(grays[0], max_corners, quality_level, min_distance)
    # seeds inside the tracking-patch margin could never be tracked
    h0, w0 = grays[0].shape
    half = window // 2
    corners = [c for c in corners
               if half <= c[0] <= w0 - 1 - half and half <= c[1] <= h0 - 1 - half]
    tracks = [Track(start_frame=0, points=[tuple(c)]) for c in corners]
    if not tracks:
        return TrackSet(tracks=[])
    pyrs = [_pyramid(g, levels) for g in grays]
    h, w = grays[0].shape
    for t in range(len(grays) - 1):
        for tr in tracks:
            if not tr.alive:
                continue
            p = tr.points[-1]
            q = track_point_lk(pyrs[t], pyrs[t + 1], p, window=window)
            if q is None or not (0 <= q[0] <= w - 1 and 0 <= q[1] <= h - 1):
                tr.alive = False
                continue
            back = track_point_lk(pyrs[t + 1], pyrs[t], q, window=window)
            if back is None or np.hypot(back[0] - p[0], back[1] - p[1]) > fb_threshold:
                tr.alive = False
                continue
            tr.points.append((float(q[0]), float(q[1])))
    return TrackSet(tracks=tracks)


def track_smoothness(trackset):
    """Mean second-difference magnitude over all tracks alive >= 3 frames;
    0 for perfectly linear motion, large for zig-zag."""
    mags = []
    for tr in trackset.tracks:
        p = np.asarray(tr.points)
        if len(p) < 3:
            continue
        second = p[2:] - 2.0 * p[1:-1] + p[:-2]
        mags.extend(np.linalg.norm(second, axis=1))
    if not mags:
        return 0.0
    return float(np.mean(mags))


# ---------------------------------------------------------------------------
# slices, volume PSNR, flow TV
# ---------------------------------------------------------------------------


def xt_slice(video, y_row):
    """Stack row y_row across time: (T, W, C)."""
    video = np.asarray(video)
    if not 0 <= y_row < video.shape[1]:
        raise IndexError(f"row {y_row} out of range for height {video.shape[1]}")
    return video[:, y_row].copy()


def psnr_xt(video, reference):
    """PSNR over the x-t reorganized volume; slicing is a permutation of the
    volume, so this equals plain volume PSNR (kept as a named metric)."""
    video = np.asarray(video)
    reference = np.asarray(reference)
    if video.shape != reference.shape:
        raise ValueError(f"shape mismatch {video.shape} vs {reference.shape}")
    slices = np.stack([xt_slice(video, y) for y in range(video.shape[1])])
    ref_slices = np.stack([xt_slice(reference, y) for y in range(reference.shape[1])])
    return psnr(slices, ref_slices)


def flow_tv(flow):
    """Mean absolute forward difference of both flow components, both axes."""
    u, v = flow[..., 0], flow[..., 1]
    terms = [np.abs(np.diff(u, axis=1)), np.abs(np.diff(u, axis=0)),
             np.abs(np.diff(v, axis=1)), np.abs(np.diff(v, axis=0))]
    return float(sum(t.mean() for t in terms))


@dataclass
class TvHistogram:
    counts: np.ndarray
    edges: np.ndarray
    per_pair: np.ndarray

    @property
    def mean_tv(self):
        return float(self.per_pair.mean())


def tv_histogram(video, bins=20, levels=DEFAULT_LEVELS, window=DEFAULT_WINDOW,
                 iters=DEFAULT_ITERS):
    """Histogram of per-frame-pair flow total variation (bin edges recorded)."""
    video = np.asarray(video)
    if video.shape[0] < 2:
        raise ValueError("tv histogram needs at least two frames")
    grays = [to_gray(f) for f in video]
    per_pair = np.array([
        flow_tv(lk_flow(grays[t], grays[t + 1], levels, window, iters))
        for t in range(video.shape[0] - 1)
    ])
    top = max(float(per_pair.max()) * 1.001, 1e-6)
    counts, edges = np.histogram(per_pair, bins=bins, range=(0.0, top))
    return TvHistogram(counts=counts, edges=edges, per_pair=per_pair)
