"""File formats: Middlebury ``.flo``, 8-bit PNG, binary PGM/PPM, dataset manifests.

Flows are float32 arrays shaped (H, W, 2) holding (u, v) in pixels/frame.
Images are float arrays shaped (H, W, 3) or (H, W) with values in [0, 1].
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import numpy as np

FLO_MAGIC = 202021.25
_FLO_HEADER = struct.Struct("<fii")

PathLike = Union[str, os.PathLike]


class FlowFormatError(ValueError):
    """Malformed ``.flo`` payload or unreadable image."""


def write_flo(flow: np.ndarray) -> bytes:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    return _FLO_HEADER.pack(FLO_MAGIC, w, h) + np.ascontiguousarray(flow, dtype="<f4").tobytes()


def read_flo(data: bytes) -> np.ndarray:
    if len(data) < _FLO_HEADER.size:
        raise FlowFormatError("truncated .flo header")
    magic, w, h = _FLO_HEADER.unpack_from(data)
    if magic != FLO_MAGIC:
        raise FlowFormatError(f"bad .flo magic {magic!r}")
    if w < 0 or h < 0:
        raise FlowFormatError(f"negative extents {w}x{h}")
    n = w * h * 2
    payload = data[_FLO_HEADER.size :]
    if len(payload) < 4 * n:
        raise FlowFormatError(f"truncated .flo payload: need {4 * n} bytes, have {len(payload)}")
    return np.frombuffer(payload, dtype="<f4", count=n).astype(np.float32).reshape(h, w, 2)


def save_flo(path: PathLike, flow: np.ndarray) -> None:
    Path(path).write_bytes(write_flo(flow))


def load_flo(path: PathLike) -> np.ndarray:
    return read_flo(Path(path).read_bytes())


# --- netpbm -----------------------------------------------------------------


def _to_levels(img: np.ndarray, maxval: int) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * maxval).astype(np.uint16 if maxval > 255 else np.uint8)


def encode_netpbm(img: np.ndarray, maxval: int = 255) -> bytes:
    """Binary PGM (2-D input) or PPM (3-channel input); 16-bit samples are big-endian."""
    img = np.asarray(img)
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode image of shape {img.shape}")
    if not 0 < maxval < 65536:
        raise ValueError("maxval must be in 1..65535")
    h, w = img.shape[:2]
    levels = _to_levels(img, maxval)
    body = levels.astype(">u2").tobytes() if maxval > 255 else levels.tobytes()
    return b"%s\n%d %d\n%d\n" % (magic, w, h, maxval) + body


def decode_netpbm(data: bytes) -> np.ndarray:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FlowFormatError("truncated netpbm header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace before raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6"):
        raise FlowFormatError(f"unsupported netpbm type {magic!r}")
    ch = 3 if magic == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h * ch
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos) if len(data) - pos >= count * np.dtype(dtype).itemsize else None
    if raw is None:
        raise FlowFormatError("truncated netpbm raster")
    arr = raw.astype(np.float64) / maxval
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


def write_image(path: PathLike, img: np.ndarray, maxval: int = 255) -> None:
    """Write by extension: .png (8-bit via Pillow), .pgm/.ppm (netpbm)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm"):
        path.write_bytes(encode_netpbm(img, maxval))
    elif suffix == ".png":
        from PIL import Image

        Image.fromarray(_to_levels(np.asarray(img), 255)).save(path, optimize=False)
    else:
        raise ValueError(f"unsupported image extension {suffix!r}")


def read_image(path: PathLike) -> np.ndarray:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm", ".pnm"):
        return decode_netpbm(path.read_bytes())
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[..., :3]
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return arr.astype(np.float64) / scale


# --- manifest ---------------------------------------------------------------

MANIFEST_FIELDS = ("frame1", "frame2", "fwd_flow", "bwd_flow", "gt_flow", "gt_boundary")


@dataclass
class ManifestRecord:
    frame1: Path
    frame2: Path
    fwd_flow: Path
    bwd_flow: Path
    gt_flow: Path
    gt_boundary: Path


def read_manifest(path: PathLike) -> List[ManifestRecord]:
    """One record per line, six whitespace-separated paths relative to the manifest's directory."""
    path = Path(path)
    root = path.parent
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != len(MANIFEST_FIELDS):
            raise ValueError(f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} paths, got {len(parts)}")
        records.append(ManifestRecord(*(root / p for p in parts)))
    return records


def format_manifest_line(paths) -> str:
    return " ".join(str(p) for p in paths) + "\n"
