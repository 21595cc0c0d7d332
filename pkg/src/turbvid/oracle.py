"""Wire protocol for external loss oracles.

An oracle is a child process that evaluates differentiable image losses
(semantic prompt contrast, perceptual distance) and returns the scalar plus
the gradient with respect to every input pixel. Messages travel over the
child's stdin/stdout:

    [4-byte little-endian u32: header length][UTF-8 JSON header][raw payload]

The header carries kind, dims, dtype, prompt strings, and the payload byte
count. Pixel floats are raw little-endian row-major (H, W, C); dtype is
"f32" on the training path, with an optional "f64" extension (advertised in
the hello capabilities) used by gradient checks, where float32 quantization
would drown the finite differences.

Oracle failure of any kind marks the handle unavailable; callers degrade to
running without the affected loss terms and never crash.
"""

from __future__ import annotations

import json
import logging
import os
import select
import shlex
import struct
import subprocess
import time

import numpy as np

from .prompts import default_pair

log = logging.getLogger(__name__)

PROTOCOL_VERSION = "1"
MAX_HEADER_BYTES = 1 << 20


class OracleError(Exception):
    """Base class for oracle failures."""


class OracleProtocolError(OracleError):
    """Malformed frame, truncated stream, or invalid response contents."""


class OracleUnavailable(OracleError):
    """The oracle is gone (spawn failed, handshake failed, died mid-run)."""


# ---------------------------------------------------------------------------
# framing
# ---------------------------------------------------------------------------


def frame_message(header: dict, payload: bytes = b"") -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if len(head) > MAX_HEADER_BYTES:
        raise OracleProtocolError(f"header too large: {len(head)} bytes > {MAX_HEADER_BYTES}")
    return struct.pack("<I", len(head)) + head + payload


def _read_exact(read_fn, n, what):
    chunks = []
    got = 0
    while got < n:
        chunk = read_fn(n - got)
        if not chunk:
            raise OracleProtocolError(f"truncated stream reading {what}: expected {n} bytes, received {got}")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_message(read_fn):
    """Parse one framed message from a read(n)->bytes callable."""
    raw_len = _read_exact(read_fn, 4, "header length")
    (head_len,) = struct.unpack("<I", raw_len)
    if head_len > MAX_HEADER_BYTES:
        raise OracleProtocolError(f"declared header length {head_len} exceeds {MAX_HEADER_BYTES}")
    head_raw = _read_exact(read_fn, head_len, "header")
    try:
        header = json.loads(head_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise OracleProtocolError(f"invalid JSON header: {e}") from e
    payload_bytes = int(header.get("payload_bytes", 0))
    payload = _read_exact(read_fn, payload_bytes, "payload") if payload_bytes else b""
    return header, payload


_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def encode_image(img: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(img, dtype=_DTYPES[dtype]).tobytes()


def decode_image(payload: bytes, h: int, w: int, c: int, dtype: str, offset=0) -> np.ndarray:
    n = h * w * c
    return np.frombuffer(payload, dtype=_DTYPES[dtype], count=n,
                         offset=offset).reshape(h, w, c).copy()


# ---------------------------------------------------------------------------
# client
# ---------------------------------------------------------------------------


class OracleClient:
    """Synchronous request/response handle to one oracle process.

    One request in flight at a time; any error permanently disables the
    handle (subsequent calls raise OracleUnavailable immediately).
    """

    def __init__(self, proc: subprocess.Popen, timeout: float = 30.0, command=""):
        self.proc = proc
        self.timeout = timeout
        self.command = command
        self.capabilities = frozenset()
        self.info = {}
        self._disabled_reason = None

    @property
    def available(self):
        return self._disabled_reason is None

    def _disable(self, reason):
        if self._disabled_reason is None:
            self._disabled_reason = reason
            log.warning("oracle %s disabled: %s", self.command or "<attached>", reason)
        try:
            self.proc.kill()
        except Exception:
            pass

    def _read_with_deadline(self, n):
        # bounded read from the child's stdout pipe
        deadline = time.monotonic() + self.timeout
        fd = self.proc.stdout.fileno()
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise OracleProtocolError(f"timeout after {self.timeout}s waiting for oracle reply")
        ready, _, _ = select.select([fd], [], [], remaining)
        if not ready:
            raise OracleProtocolError(f"timeout after {self.timeout}s waiting for oracle reply")
        return os.read(fd, n)

    def _roundtrip(self, header, payload=b""):
        if not self.available:
            raise OracleUnavailable(self._disabled_reason)
        try:
            self.proc.stdin.write(frame_message(header, payload))
            self.proc.stdin.flush()
            resp, resp_payload = read_message(self._read_with_deadline)
        except (OSError, ValueError, OracleProtocolError) as e:
            self._disable(f"{type(e).__name__}: {e}")
            raise OracleUnavailable(str(e)) from e
        if resp.get("status") != "ok":
            msg = resp.get("message", "unspecified oracle error")
            self._disable(f"oracle reported error: {msg}")
            raise OracleUnavailable(msg)
        return resp, resp_payload

    def hello(self):
        resp, _ = self._roundtrip({"kind": "hello", "version": PROTOCOL_VERSION})
        if resp.get("version") != PROTOCOL_VERSION:
            self._disable(f"protocol version mismatch: ours {PROTOCOL_VERSION}, "
                          f"oracle {resp.get('version')!r}")
            raise OracleUnavailable(self._disabled_reason)
        self.capabilities = frozenset(resp.get("capabilities", ()))
        self.info = {k: v for k, v in resp.items() if k not in ("kind", "status")}
        return self.info

    def _eval(self, kind, img, extra_header, extra_payload=b""):
        img = np.asarray(img)
        h, w, c = img.shape
        dtype = "f64" if img.dtype == np.float64 and "f64" in self.info.get("dtypes", ()) else "f32"
        body = encode_image(img, dtype) + extra_payload
        header = {"kind": kind, "h": h, "w": w, "c": c, "dtype": dtype,
                  "payload_bytes": len(body)}
        header.update(extra_header)
        resp, payload = self._roundtrip(header, body)
        loss = float(resp["loss"])
        grad = decode_image(payload, h, w, c, resp.get("dtype", dtype))
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            self._disable("oracle returned non-finite loss or gradient")
            raise OracleUnavailable(self._disabled_reason)
        return loss, grad.astype(img.dtype)

    def semantic_eval(self, img, prompt_pos, prompt_neg):
        return self._eval("semantic_eval", img,
                          {"prompt_pos": prompt_pos, "prompt_neg": prompt_neg})

    def perceptual_eval(self, img, reference):
        reference = np.asarray(reference, dtype=img.dtype)
        if reference.shape != np.asarray(img).shape:
            raise OracleProtocolError(
                f"reference shape {reference.shape} != image shape {np.asarray(img).shape}")
        dtype = "f64" if np.asarray(img).dtype == np.float64 and "f64" in self.info.get("dtypes", ()) else "f32"
        return self._eval("perceptual_eval", img, {"has_reference": True},
                          extra_payload=encode_image(reference, dtype))

    def shutdown(self):
        if self.available:
            try:
                self.proc.stdin.write(frame_message({"kind": "shutdown"}))
                self.proc.stdin.flush()
            except OSError:
                pass
        try:
            self.proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            self.proc.kill()


def spawn_oracle(command, env=None, timeout=30.0) -> OracleClient:
    """Launch an oracle process and complete the hello handshake.

    Raises OracleUnavailable on spawn or handshake failure; callers then run
    with semantic/perceptual weights zeroed.
    """
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    full_env = dict(os.environ)
    if env:
        full_env.update(env)
    try:
        proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                env=full_env)
    except OSError as e:
        raise OracleUnavailable(f"failed to spawn oracle {argv!r}: {e}") from e
    client = OracleClient(proc, timeout=timeout, command=" ".join(argv))
    client.hello()
    return client


# ---------------------------------------------------------------------------
# handles used by the training loop
# ---------------------------------------------------------------------------


class CallableOracle:
    """In-process oracle built from plain callables (tests, analytic mocks)."""

    def __init__(self, semantic_fn=None, perceptual_fn=None):
        self._semantic = semantic_fn
        self._perceptual = perceptual_fn
        self.available = True
        self.capabilities = frozenset(
            c for c, fn in (("semantic", semantic_fn), ("perceptual", perceptual_fn)) if fn)

    def semantic_eval(self, img, prompt_pos, prompt_neg):
        return self._semantic(img, prompt_pos, prompt_neg)

    def perceptual_eval(self, img, reference):
        return self._perceptual(img, reference)


class OracleSet:
    """The oracle handles a training run uses (either side may be absent)."""

    def __init__(self, semantic=None, perceptual=None, prompt_pair=None):
        self.semantic = semantic
        self.perceptual = perceptual
        self.prompt_pos, self.prompt_neg = prompt_pair or default_pair()

    @property
    def has_semantic(self):
        return self.semantic is not None and self.semantic.available

    @property
    def has_perceptual(self):
        return self.perceptual is not None and self.perceptual.available

    @classmethod
    def from_client(cls, client: OracleClient, prompt_pair=None):
        return cls(semantic=client if "semantic" in client.capabilities else None,
                   perceptual=client if "perceptual" in client.capabilities else None,
                   prompt_pair=prompt_pair)
