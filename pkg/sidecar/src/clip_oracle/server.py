"""Stdio request loop: hello/capability handshake, then one evaluation per
framed request. One request in flight; any internal error is reported as a
status=error reply rather than a crash, letting the consumer degrade."""

from __future__ import annotations

import sys

from . import PROTOCOL_VERSION
from .losses import perceptual_loss, semantic_loss
from .protocol import (decode_image, dtype_itemsize, encode_image, frame_message,
                       read_message)


def serve(encoder, stdin=None, stdout=None):
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer

    def reply(header, payload=b""):
        stdout.write(frame_message(header, payload))
        stdout.flush()

    while True:
        try:
            header, payload = read_message(stdin.read)
        except EOFError:
            return 0
        kind = header.get("kind")
        if kind == "hello":
            reply({"kind": "hello", "status": "ok", "version": PROTOCOL_VERSION,
                   "capabilities": ["semantic", "perceptual"],
                   "dtypes": ["f32", "f64"],
                   "model": encoder.model_id, "pretrained": encoder.mode == "pretrained",
                   "preprocess": encoder.describe_preprocess()})
            continue
        if kind == "shutdown":
            reply({"kind": "shutdown", "status": "ok"})
            return 0
        try:
            h, w, c = int(header["h"]), int(header["w"]), int(header["c"])
            dtype = header.get("dtype", "f32")
            img = decode_image(payload, h, w, c, dtype)
            if kind == "semantic_eval":
                loss, grad = semantic_loss(encoder, img,
                                           header.get("prompt_pos", ""),
                                           header.get("prompt_neg", ""))
            elif kind == "perceptual_eval":
                ref = decode_image(payload, h, w, c, dtype,
                                   offset=h * w * c * dtype_itemsize(dtype))
                loss, grad = perceptual_loss(encoder, img, ref)
            else:
                reply({"kind": "result", "status": "error",
                       "message": f"unknown kind {kind!r}"})
                continue
            reply({"kind": "result", "status": "ok", "loss": loss, "dtype": dtype,
                   "h": h, "w": w, "c": c,
                   "payload_bytes": h * w * c * dtype_itemsize(dtype)},
                  encode_image(grad, dtype))
        except Exception as e:  # report, never crash the loop
            reply({"kind": "result", "status": "error",
                   "message": f"{type(e).__name__}: {e}"})
