"""Wire framing for the oracle protocol (server side).

Frame layout: 4-byte little-endian u32 header length, UTF-8 JSON header,
raw payload. Image payloads are row-major (H, W, C) little-endian floats;
dtype "f32" or "f64" as declared in the header.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAX_HEADER_BYTES = 1 << 20

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class ProtocolError(Exception):
    pass


def frame_message(header: dict, payload: bytes = b"") -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if len(head) > MAX_HEADER_BYTES:
        raise ProtocolError(f"header too large: {len(head)} bytes")
    return struct.pack("<I", len(head)) + head + payload


def _read_exact(read_fn, n, what):
    chunks = []
    got = 0
    while got < n:
        chunk = read_fn(n - got)
        if not chunk:
            raise EOFError(f"stream closed reading {what}: expected {n} bytes, received {got}")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_message(read_fn):
    raw = _read_exact(read_fn, 4, "header length")
    (head_len,) = struct.unpack("<I", raw)
    if head_len > MAX_HEADER_BYTES:
        raise ProtocolError(f"declared header length {head_len} exceeds limit")
    header = json.loads(_read_exact(read_fn, head_len, "header").decode("utf-8"))
    n = int(header.get("payload_bytes", 0))
    payload = _read_exact(read_fn, n, "payload") if n else b""
    return header, payload


def decode_image(payload: bytes, h: int, w: int, c: int, dtype: str, offset=0) -> np.ndarray:
    return np.frombuffer(payload, dtype=_DTYPES[dtype], count=h * w * c,
                         offset=offset).reshape(h, w, c).copy()


def encode_image(img: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(img, dtype=_DTYPES[dtype]).tobytes()


def dtype_itemsize(dtype: str) -> int:
    return _DTYPES[dtype].itemsize
