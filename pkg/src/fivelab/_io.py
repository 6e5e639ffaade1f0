"""Small serialization helpers shared by checkpoints, trajectory dumps and reports."""

from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image


def encode_array(arr) -> dict:
    """Pack an array as little-endian float64 bytes in base64 (exact round trip)."""
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    return {
        "shape": list(a.shape),
        "dtype": "<f8",
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def decode_array(obj: dict) -> np.ndarray:
    if obj.get("dtype", "<f8") != "<f8":
        raise ValueError(f"unsupported dtype {obj.get('dtype')!r}")
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(obj["shape"])


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_of(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def stable_int(*parts) -> int:
    """Process-independent 32-bit integer from a tuple of strings (Python's hash() is salted)."""
    h = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode("utf-8"), digest_size=4)
    return int.from_bytes(h.digest(), "little")


def read_png(path, *, gray: bool = False) -> np.ndarray:
    """Read a PNG as float (C,H,W) in [0,1]; ``gray`` returns raw uint8 (H,W)."""
    with Image.open(path) as im:
        if gray:
            return np.asarray(im.convert("L"), dtype=np.uint8)
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def to_uint8(frame) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, frame) -> None:
    """Write a float (C,H,W) frame in [0,1] or a uint8 (H,W) mask."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(frame)
    if arr.dtype == np.uint8 and arr.ndim == 2:
        Image.fromarray(arr, mode="L").save(path, optimize=False)
        return
    img = to_uint8(arr).transpose(1, 2, 0)
    Image.fromarray(img, mode="RGB").save(path, optimize=False)


def png_bytes(frame) -> bytes:
    import io

    buf = io.BytesIO()
    img = to_uint8(frame).transpose(1, 2, 0)
    Image.fromarray(img, mode="RGB").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def frame_from_png_bytes(data: bytes) -> np.ndarray:
    import io

    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)
