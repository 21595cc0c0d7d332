"""Differentiable losses over the encoder: value + d(loss)/d(pixel)."""

from __future__ import annotations

import numpy as np
import torch


def semantic_loss(encoder, img: np.ndarray, prompt_pos: str, prompt_neg: str):
    """Prompt-contrast loss: -(cos(e_img, e_pos) - cos(e_img, e_neg)).

    Returns (float in [-2, 2], gradient array with the image's shape/dtype).
    """
    x = torch.tensor(img, dtype=encoder.torch_dtype, requires_grad=True)
    e_img = encoder.image_embedding(x)
    e_pos = encoder.text_embedding(prompt_pos)
    e_neg = encoder.text_embedding(prompt_neg)
    loss = -(e_img @ e_pos - e_img @ e_neg)
    loss.backward()
    return float(loss.item()), x.grad.numpy().astype(img.dtype)


def perceptual_loss(encoder, img: np.ndarray, reference: np.ndarray):
    """Patch-feature distance: mean squared difference of unit-normalized
    vision-tower patch features, averaged over layers and tokens."""
    x = torch.tensor(img, dtype=encoder.torch_dtype, requires_grad=True)
    with torch.no_grad():
        ref_feats = [f.detach() for f in encoder.patch_features(
            torch.tensor(reference, dtype=encoder.torch_dtype))]
    feats = encoder.patch_features(x)
    terms = [((a - b) ** 2).mean() for a, b in zip(feats, ref_feats)]
    loss = torch.stack(terms).mean()
    loss.backward()
    return float(loss.item()), x.grad.numpy().astype(img.dtype)
