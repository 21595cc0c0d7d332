"""Reference image metrics and the rank-correlation machinery behind prompt
selection.

kendall_tau is the tie-corrected tau-b computed from exact integer pair
counts; spearman_rho is Pearson correlation of average ranks. select_prompt
ranks candidate prompt pairs by how well their loss sequence tracks a
perceptual reference sequence, combined score = (KRCC + SRCC) / 2.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .losses import ssim_loss

log = logging.getLogger(__name__)

PSNR_CAP_DB = 99.0


def psnr(a, b, peak=1.0):
    """10*log10(peak^2 / MSE), capped at 99 dB for (near-)identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP_DB)


def ssim_eval(a, b):
    """Mean windowed SSIM in [-1, 1]; exactly 1 - ssim_loss by construction."""
    a64 = np.asarray(a, dtype=np.float64)
    return 1.0 - ssim_loss(ad.constant(a64), np.asarray(b, dtype=np.float64)).item()


def _validate_pair(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"sequence lengths differ: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("correlation needs sequences of length >= 2")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("correlation inputs must be finite")
    return a, b


def kendall_tau(a, b):
    """Tau-b: (C - D) / sqrt((C + D + Tx) * (C + D + Ty)) over all pairs.

    Zero variance in either sequence is reported as 0 with a warning.
    """
    a, b = _validate_pair(a, b)
    if np.all(a == a[0]) or np.all(b == b[0]):
        log.warning("kendall_tau: zero variance input, returning 0")
        return 0.0
    da = np.sign(a[:, None] - a[None, :])
    db = np.sign(b[:, None] - b[None, :])
    iu = np.triu_indices(a.size, k=1)
    sa, sb = da[iu], db[iu]
    concordant = int(np.sum((sa * sb) > 0))
    discordant = int(np.sum((sa * sb) < 0))
    ties_a_only = int(np.sum((sa == 0) & (sb != 0)))
    ties_b_only = int(np.sum((sb == 0) & (sa != 0)))
    denom = math.sqrt((concordant + discordant + ties_a_only)
                      * (concordant + discordant + ties_b_only))
    if denom == 0:
        log.warning("kendall_tau: all pairs tied, returning 0")
        return 0.0
    return (concordant - discordant) / denom


def rankdata(x):
    """Average ranks (1-based) with ties sharing their mean rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(a, b):
    """Pearson correlation of average ranks."""
    a, b = _validate_pair(a, b)
    if np.all(a == a[0]) or np.all(b == b[0]):
        log.warning("spearman_rho: zero variance input, returning 0")
        return 0.0
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0:
        return 0.0
    return float(ra @ rb) / denom


@dataclass
class CandidateScore:
    index: int          # position in the candidate list (1-based for reports)
    label: str
    krcc: float
    srcc: float
    combined: float
    rank: int = 0


@dataclass
class CorrelationReport:
    scores: list

    def ranking(self):
        return [s.index for s in sorted(self.scores, key=lambda s: s.rank)]

    def best(self):
        return min(self.scores, key=lambda s: s.rank)


def select_prompt(reference_seq, candidates):
    """Rank candidate sequences by combined rank correlation with the reference.

    `candidates` is an ordered mapping label -> sequence. Ties in combined
    score break toward the lower candidate index.
    """
    if not candidates:
        raise ValueError("select_prompt: no candidate sequences")
    scores = []
    for i, (label, seq) in enumerate(candidates.items(), start=1):
        k = kendall_tau(reference_seq, seq)
        s = spearman_rho(reference_seq, seq)
        scores.append(CandidateScore(index=i, label=str(label), krcc=k, srcc=s,
                                     combined=0.5 * (k + s)))
    by_rank = sorted(scores, key=lambda c: (-c.combined, c.index))
    for pos, c in enumerate(by_rank, start=1):
        c.rank = pos
    return CorrelationReport(scores=scores)
