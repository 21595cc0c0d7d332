"""Analytic mock oracle, runnable as `python -m turbvid.mock_oracle`.

Implements the stdio wire protocol with closed-form losses so the training
loop, the protocol plumbing, and end-to-end gradients can be exercised
without any ML dependency:

    mean    semantic loss = mean(pixels), grad = 1/(H*W*C)
    cosine  semantic loss = -(cos(e_img, e_pos) - cos(e_img, e_neg)) over a
            fixed random projection embedding; exact analytic gradient
    mse     perceptual loss = mean((img - ref)^2), grad = 2*(img - ref)/n

Failure-injection flags (--crash-after, --version) support the degradation
tests. Evaluations honor the f64 payload extension for gradient checks.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .oracle import (PROTOCOL_VERSION, decode_image, encode_image, frame_message,
                     read_message)

EMBED_DIM = 32


def _unit(v):
    return v / max(np.linalg.norm(v), 1e-12)


def _text_embedding(text: str) -> np.ndarray:
    rng = np.random.default_rng(np.frombuffer(text.encode("utf-8"), dtype=np.uint8))
    return _unit(rng.normal(size=EMBED_DIM))


class MockOracle:
    def __init__(self, crash_after=None, version=PROTOCOL_VERSION):
        self.crash_after = crash_after
        self.version = version
        self.served = 0

    # -- losses ---------------------------------------------------------------

    def semantic_mean(self, img, pos, neg):
        grad = np.full(img.shape, 1.0 / img.size)
        return float(img.mean()), grad

    def semantic_cosine(self, img, pos, neg):
        # embedding = fixed random projection of the flattened image, normalized
        rng = np.random.default_rng(1234)
        proj = rng.normal(size=(EMBED_DIM, img.size)) / np.sqrt(img.size)
        z = proj @ img.reshape(-1).astype(np.float64)
        nz = np.linalg.norm(z)
        if nz < 1e-12:
            return 0.0, np.zeros(img.shape)
        e = z / nz
        diff = _text_embedding(pos) - _text_embedding(neg)
        loss = -float(e @ diff)
        # d/dz of -(z/|z|)·diff = -(diff - e (e·diff)) / |z|
        dz = -(diff - e * (e @ diff)) / nz
        grad = (proj.T @ dz).reshape(img.shape)
        return loss, grad

    def perceptual_mse(self, img, ref):
        d = img.astype(np.float64) - ref.astype(np.float64)
        return float((d * d).mean()), 2.0 * d / d.size


def serve(mode="mean", crash_after=None, version=PROTOCOL_VERSION,
          stdin=None, stdout=None):
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    oracle = MockOracle(crash_after=crash_after, version=version)

    def reply(header, payload=b""):
        stdout.write(frame_message(header, payload))
        stdout.flush()

    while True:
        try:
            header, payload = read_message(stdin.read)
        except Exception:
            return 0  # parent closed the pipe
        kind = header.get("kind")
        if kind == "hello":
            reply({"kind": "hello", "status": "ok", "version": version,
                   "capabilities": ["semantic", "perceptual"],
                   "dtypes": ["f32", "f64"],
                   "model": f"mock-{mode}", "preprocess": "none"})
            continue
        if kind == "shutdown":
            reply({"kind": "shutdown", "status": "ok"})
            return 0

        if oracle.crash_after is not None and oracle.served >= oracle.crash_after:
            return 1  # simulated mid-training death
        oracle.served += 1

        h, w, c = header["h"], header["w"], header["c"]
        dtype = header.get("dtype", "f32")
        img = decode_image(payload, h, w, c, dtype).astype(np.float64)
        if kind == "semantic_eval":
            fn = oracle.semantic_cosine if mode == "cosine" else oracle.semantic_mean
            loss, grad = fn(img, header.get("prompt_pos", ""), header.get("prompt_neg", ""))
        elif kind == "perceptual_eval":
            ref = decode_image(payload, h, w, c, dtype, offset=h * w * c * (8 if dtype == "f64" else 4))
            loss, grad = oracle.perceptual_mse(img, ref.astype(np.float64))
        else:
            reply({"kind": "result", "status": "error", "message": f"unknown kind {kind!r}"})
            continue
        reply({"kind": "result", "status": "ok", "loss": loss, "dtype": dtype,
               "h": h, "w": w, "c": c,
               "payload_bytes": h * w * c * (8 if dtype == "f64" else 4)},
              encode_image(grad, dtype))


def main(argv=None):
    ap = argparse.ArgumentParser(description="analytic mock loss oracle (stdio protocol)")
    ap.add_argument("--mode", choices=["mean", "cosine"], default="mean",
                    help="semantic loss flavor")
    ap.add_argument("--crash-after", type=int, default=None, metavar="N",
                    help="exit abnormally after N evaluations")
    ap.add_argument("--version", default=PROTOCOL_VERSION,
                    help="protocol version to claim in hello")
    args = ap.parse_args(argv)
    return serve(mode=args.mode, crash_after=args.crash_after, version=args.version)


if __name__ == "__main__":
    sys.exit(main())
