"""Frame/video I/O.

Two interchange formats:
  - a directory of zero-padded numbered PNG frames (written 16-bit, read
    8- or 16-bit), the inspectable default;
  - .fvid: magic "FVID", version u32, T,H,W,C u32, float32 LE row-major
    frames — lossless and bit-stable for round-trips.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

FVID_MAGIC = b"FVID"
FVID_VERSION = 1
FVID_HEADER_BYTES = 24


class VideoIOError(ValueError):
    pass


@dataclass
class VideoVolume:
    frames: np.ndarray  # (T,H,W,C) float32 in [0,1]

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 4:
            raise VideoIOError(f"video must be (T,H,W,C), got shape {frames.shape}")
        if frames.shape[-1] not in (1, 3):
            raise VideoIOError(f"channel count must be 1 or 3, got {frames.shape[-1]}")
        self.frames = np.clip(frames, 0.0, 1.0)

    @property
    def t(self):
        return self.frames.shape[0]

    @property
    def h(self):
        return self.frames.shape[1]

    @property
    def w(self):
        return self.frames.shape[2]

    @property
    def c(self):
        return self.frames.shape[3]


def as_volume(video) -> np.ndarray:
    """Accept a VideoVolume or raw array; return validated (T,H,W,C) float32."""
    if isinstance(video, VideoVolume):
        return video.frames
    return VideoVolume(frames=video).frames


_INDEX_RE = re.compile(r"(\d+)\D*$")


def _frame_index(path: Path):
    m = _INDEX_RE.search(path.stem)
    return int(m.group(1)) if m else None


def _read_png(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise VideoIOError(f"unreadable image: {path}")
    if img.dtype == np.uint8:
        scale = 255.0
    elif img.dtype == np.uint16:
        scale = 65535.0
    else:
        raise VideoIOError(f"unsupported PNG depth {img.dtype} in {path}")
    arr = img.astype(np.float32) / scale
    if arr.ndim == 2:
        return arr[..., None]
    if arr.shape[-1] == 4:
        arr = arr[..., :3]
    return arr[..., ::-1].copy()  # BGR -> RGB


def _write_png(path: Path, frame: np.ndarray):
    arr = np.round(np.clip(frame, 0.0, 1.0) * 65535.0).astype(np.uint16)
    if arr.shape[-1] == 3:
        arr = arr[..., ::-1]  # RGB -> BGR
    else:
        arr = arr[..., 0]
    if not cv2.imwrite(str(path), arr):
        raise VideoIOError(f"failed to write {path}")


def load_video(path) -> VideoVolume:
    """Load a .fvid file or a directory of numbered PNG frames."""
    path = Path(path)
    if path.is_file():
        return _load_fvid(path)
    if not path.is_dir():
        raise VideoIOError(f"no such video: {path}")
    pngs = sorted(path.glob("*.png"))
    if not pngs:
        raise VideoIOError(f"no frames found in {path}")
    indexed = {}
    unnumbered = [p.name for p in pngs if _frame_index(p) is None]
    if unnumbered:
        raise VideoIOError(f"frames without numeric index in {path}: {unnumbered}")
    for p in pngs:
        indexed[_frame_index(p)] = p
    lo, hi = min(indexed), max(indexed)
    missing = [i for i in range(lo, hi + 1) if i not in indexed]
    if missing:
        raise VideoIOError(f"missing frame indices in {path}: {missing}")
    frames = []
    shapes = {}
    for i in range(lo, hi + 1):
        arr = _read_png(indexed[i])
        frames.append(arr)
        shapes.setdefault(arr.shape, []).append(indexed[i].name)
    if len(shapes) > 1:
        detail = {str(k): v[:4] for k, v in shapes.items()}
        raise VideoIOError(f"mixed frame dimensions in {path}: {detail}")
    return VideoVolume(frames=np.stack(frames))


def save_video(video, path, fmt="png"):
    """Write PNG frames into a directory, or a single .fvid file."""
    frames = as_volume(video)
    path = Path(path)
    if fmt == "fvid":
        _save_fvid(frames, path)
    elif fmt == "png":
        path.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(frames):
            _write_png(path / f"frame_{i:06d}.png", frame)
    else:
        raise VideoIOError(f"unknown format {fmt!r} (use 'png' or 'fvid')")


def _save_fvid(frames: np.ndarray, path: Path):
    t, h, w, c = frames.shape
    with open(path, "wb") as f:
        f.write(FVID_MAGIC)
        f.write(struct.pack("<IIIII", FVID_VERSION, t, h, w, c))
        f.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def _load_fvid(path: Path) -> VideoVolume:
    raw = path.read_bytes()
    if raw[:4] != FVID_MAGIC:
        raise VideoIOError(f"{path}: not an fvid file (magic {raw[:4]!r})")
    version, t, h, w, c = struct.unpack_from("<IIIII", raw, 4)
    if version != FVID_VERSION:
        raise VideoIOError(f"{path}: unsupported fvid version {version}")
    expected = FVID_HEADER_BYTES + 4 * t * h * w * c
    if len(raw) != expected:
        raise VideoIOError(f"{path}: expected {expected} bytes, found {len(raw)}")
    frames = np.frombuffer(raw, dtype="<f4", offset=FVID_HEADER_BYTES).reshape(t, h, w, c)
    return VideoVolume(frames=frames.copy())


def load_disparity(path, t, h, w) -> np.ndarray:
    """Per-frame disparity maps in [0,1]: a directory of grayscale images or
    an .fvid with one channel. Values are clamped on load."""
    path = Path(path)
    vol = load_video(path)
    maps = vol.frames[..., 0] if vol.c == 1 else vol.frames.mean(axis=-1)
    if maps.shape != (t, h, w):
        if maps.shape[0] == 1 and maps.shape[1:] == (h, w):
            maps = np.repeat(maps, t, axis=0)
        else:
            raise VideoIOError(
                f"disparity shape {maps.shape} does not match video ({t},{h},{w})")
    return np.clip(maps, 0.0, 1.0)
