"""Vision-language encoder wrapper.

Two modes:
  - pretrained: a CLIP checkpoint loaded through transformers (requires the
    weights to be downloadable or cached); preprocessing follows the model's
    native resolution and normalization.
  - seeded: the same CLIP architecture at reduced width with deterministic
    random weights and a hash tokenizer. No downloads; embeddings are
    meaningless semantically but the full computational path (resize,
    normalize, vision/text towers, cosine head) is identical, which is what
    protocol and gradient tests need.

Losses live in losses.py; this module only produces differentiable image
embeddings, text embeddings, and patch feature stacks.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn.functional as F
from transformers import CLIPConfig, CLIPModel, CLIPTokenizer

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

DEFAULT_MODEL_ID = "openai/clip-vit-base-patch32"
SEEDED_SEED = 20240811


def _seeded_config():
    # reduced-width ViT-B-ish config: fast on CPU, same module graph
    return CLIPConfig(
        text_config=dict(hidden_size=64, intermediate_size=128,
                         num_hidden_layers=2, num_attention_heads=4,
                         max_position_embeddings=77, vocab_size=49408),
        vision_config=dict(hidden_size=64, intermediate_size=128,
                           num_hidden_layers=2, num_attention_heads=4,
                           image_size=64, patch_size=8),
        projection_dim=64,
    )


class Encoder:
    def __init__(self, mode="pretrained", model_id=DEFAULT_MODEL_ID, device="cpu",
                 precision="f32"):
        self.mode = mode
        self.device = device
        self.torch_dtype = torch.float64 if precision == "f64" else torch.float32
        torch.manual_seed(SEEDED_SEED)
        if mode == "pretrained":
            self.model = CLIPModel.from_pretrained(model_id)
            self.tokenizer = CLIPTokenizer.from_pretrained(model_id)
            self.model_id = model_id
        elif mode == "seeded":
            self.model = CLIPModel(_seeded_config())
            self.tokenizer = None
            self.model_id = f"seeded-clip-{SEEDED_SEED}"
        else:
            raise ValueError(f"unknown encoder mode {mode!r}")
        self.model.eval().to(device=device, dtype=self.torch_dtype)
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.resolution = int(self.model.config.vision_config.image_size)
        self._mean = torch.tensor(CLIP_MEAN, device=device,
                                  dtype=self.torch_dtype).view(1, 3, 1, 1)
        self._std = torch.tensor(CLIP_STD, device=device,
                                 dtype=self.torch_dtype).view(1, 3, 1, 1)
        self._text_cache = {}

    # -- preprocessing ---------------------------------------------------------

    def describe_preprocess(self):
        return {"resize": [self.resolution, self.resolution], "interp": "bilinear",
                "mean": list(CLIP_MEAN), "std": list(CLIP_STD),
                "tokenizer": "clip-bpe" if self.tokenizer else "hashed"}

    def preprocess(self, img: torch.Tensor) -> torch.Tensor:
        """(H,W,C) float in [0,1], autograd-capable -> (1,3,R,R) normalized.
        Gradients flow back through the resize to the original resolution."""
        x = img.permute(2, 0, 1).unsqueeze(0)
        if x.shape[1] == 1:
            x = x.repeat(1, 3, 1, 1)
        x = F.interpolate(x, size=(self.resolution, self.resolution),
                          mode="bilinear", align_corners=False)
        return (x - self._mean) / self._std

    # -- embeddings --------------------------------------------------------------

    def _token_ids(self, text: str) -> torch.Tensor:
        if self.tokenizer is not None:
            enc = self.tokenizer(text, return_tensors="pt", padding="max_length",
                                 truncation=True, max_length=32)
            return enc["input_ids"], enc["attention_mask"]
        # deterministic hash tokenizer for the seeded encoder
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        vocab = self.model.config.text_config.vocab_size
        ids = [int.from_bytes(digest[i:i + 4], "little") % vocab for i in range(0, 28, 4)]
        ids = torch.tensor([[vocab - 2] + ids + [vocab - 1]])
        return ids, torch.ones_like(ids)

    @staticmethod
    def _projected(out):
        # transformers >= 5 returns the full output object from
        # get_text_features / get_image_features; older versions the tensor
        return out.pooler_output if hasattr(out, "pooler_output") else out

    def text_embedding(self, text: str) -> torch.Tensor:
        if text not in self._text_cache:
            ids, mask = self._token_ids(text)
            with torch.no_grad():
                emb = self._projected(self.model.get_text_features(
                    input_ids=ids.to(self.device), attention_mask=mask.to(self.device)))
            self._text_cache[text] = F.normalize(emb[0], dim=-1)
        return self._text_cache[text]

    def image_embedding(self, img: torch.Tensor) -> torch.Tensor:
        emb = self._projected(self.model.get_image_features(pixel_values=self.preprocess(img)))
        return F.normalize(emb[0], dim=-1)

    def patch_features(self, img: torch.Tensor):
        """Unit-normalized patch token features from every other vision layer."""
        out = self.model.vision_model(pixel_values=self.preprocess(img),
                                      output_hidden_states=True)
        feats = []
        hidden = out.hidden_states
        for layer in range(1, len(hidden), 2):
            tokens = hidden[layer][0, 1:]  # drop the class token
            feats.append(F.normalize(tokens, dim=-1))
        return feats
