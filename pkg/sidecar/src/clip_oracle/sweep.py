"""Prompt sweep: record the perceptual distance and each candidate prompt's
semantic loss across a degradation sweep, as the CSV consumed by the
consumer's prompt-ranking command (columns: iter, lpips, text1..textN)."""

from __future__ import annotations

import csv

import numpy as np
import torch
import torch.nn.functional as F

from .losses import perceptual_loss, semantic_loss
from .prompts import PROMPT_PAIRS


def blur_noise_sweep(base: np.ndarray, steps: int = 12, seed: int = 0):
    """Progressively blur + noise a clean image; step 0 is the original."""
    rng = np.random.default_rng(seed)
    out = [base.copy()]
    x = torch.tensor(base, dtype=torch.float32).permute(2, 0, 1).unsqueeze(0)
    for i in range(1, steps):
        sigma = 0.5 * i
        radius = max(1, int(3 * sigma))
        grid = torch.arange(-radius, radius + 1, dtype=torch.float32)
        k = torch.exp(-0.5 * (grid / sigma) ** 2)
        k = (k / k.sum()).view(1, 1, -1)
        c = x.shape[1]
        blurred = F.conv2d(F.pad(x, (radius, radius, 0, 0), mode="replicate"),
                           k.unsqueeze(2).repeat(c, 1, 1, 1), groups=c)
        blurred = F.conv2d(F.pad(blurred, (0, 0, radius, radius), mode="replicate"),
                           k.unsqueeze(3).repeat(c, 1, 1, 1), groups=c)
        frame = blurred[0].permute(1, 2, 0).numpy()
        frame = frame + rng.normal(0, 0.01 * i, frame.shape)
        out.append(np.clip(frame, 0.0, 1.0).astype(np.float32))
    return out


def synthetic_test_image(h=96, w=96, seed=0):
    """Stand-in natural image: smooth shading, edges, and fine texture."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    shading = 0.45 + 0.25 * np.sin(2 * np.pi * xs / w) * np.cos(np.pi * ys / h)
    texture = rng.uniform(-0.5, 0.5, (h, w))
    for _ in range(2):
        texture = 0.25 * (np.roll(texture, 1, 0) + np.roll(texture, -1, 0)
                          + np.roll(texture, 1, 1) + np.roll(texture, -1, 1))
    img = shading + 0.35 * texture
    img[h // 4:h // 2, w // 4:w // 2] += 0.3   # bright block with hard edges
    img[5 * h // 8:7 * h // 8, 5 * w // 8:7 * w // 8] -= 0.3
    img = np.clip(img, 0.02, 0.98)
    rgb = np.stack([img, np.clip(img * 0.95 + 0.02, 0, 1),
                    np.clip(img * 0.9 + 0.04, 0, 1)], axis=-1)
    return rgb.astype(np.float32)


def run_sweep(encoder, base: np.ndarray, steps: int, out_path, prompts=PROMPT_PAIRS,
              seed: int = 0):
    frames = blur_noise_sweep(base, steps=steps, seed=seed)
    fieldnames = ["iter", "lpips"] + [f"text{i}" for i in range(1, len(prompts) + 1)]
    with open(out_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for step, frame in enumerate(frames):
            row = {"iter": step}
            row["lpips"], _ = perceptual_loss(encoder, frame, base)
            for i, (pos, neg) in enumerate(prompts, start=1):
                row[f"text{i}"], _ = semantic_loss(encoder, frame, pos, neg)
            writer.writerow(row)
    return len(frames)
