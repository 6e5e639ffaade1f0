"""Feature providers and the feature-based metrics (perceptual, structure, text-image similarity).

The built-in provider is a cheap deterministic stand-in for learned backbones.
Real backbones can be plugged in over HTTP with ``HttpFeatureProvider``; the
same wire protocol is served by ``serve_provider`` for any in-process provider.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import threading
import time
import warnings
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import requests

from .._io import frame_from_png_bytes, png_bytes

EMBED_DIM = 64

# coarse colour vocabulary shared by text and image embeddings (RGB in [0,1])
COLOR_WORDS = {
    "red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0), "cyan": (0.0, 1.0, 1.0), "magenta": (1.0, 0.0, 1.0),
    "purple": (0.5, 0.0, 0.5), "orange": (1.0, 0.5, 0.0), "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0), "gray": (0.5, 0.5, 0.5), "grey": (0.5, 0.5, 0.5),
}


class ProviderError(RuntimeError):
    """A feature provider failed; the affected metric is reported as unavailable."""


class MaskFallbackWarning(UserWarning):
    pass


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0.0:
        raise ProviderError("embedding has zero or non-finite norm")
    return v / n


class BuiltinFeatureProvider:
    """Deterministic features with no learned weights.

    patch_features: non-overlapping p x p patches, flattened and divided by sqrt(d).
    text_embed: signed hashed bag of character bigrams plus a colour-word channel.
    image_embed: pooled grid statistics pushed through a fixed seeded projection.
    """

    provider_id = "builtin"
    version = "1"

    def __init__(self, patch: int = 8, grid: int = 4, dim: int = EMBED_DIM):
        if patch < 1 or grid < 1 or dim < 4:
            raise ValueError("bad provider geometry")
        self.patch = patch
        self.grid = grid
        self.dim = dim
        self._proj = {}

    def patch_features(self, frame) -> np.ndarray:
        x = np.asarray(frame, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        c, h, w = x.shape
        p = self.patch
        if h < p or w < p:
            raise ProviderError(f"frame {h}x{w} smaller than patch {p}")
        hp, wp = h // p, w // p
        x = x[:, : hp * p, : wp * p].reshape(c, hp, p, wp, p)
        feats = x.transpose(1, 3, 0, 2, 4).reshape(hp * wp, c * p * p)
        return feats / math.sqrt(c * p * p)

    def text_embed(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        s = " " + " ".join(str(text).lower().split()) + " "
        for a, b in zip(s, s[1:]):
            d = hashlib.blake2b((a + b).encode("utf-8"), digest_size=4).digest()
            k = int.from_bytes(d, "little")
            v[3 + k % (self.dim - 3)] += 1.0 if (k >> 31) & 1 else -1.0
        words = [w.strip(".,;:!?\"'") for w in s.split()]
        colors = [COLOR_WORDS[w] for w in words if w in COLOR_WORDS]
        if colors:
            v[:3] = 4.0 * (np.mean(colors, axis=0) - 0.5) * math.sqrt(len(s))
        return _unit(v) if np.any(v) else _unit(np.eye(self.dim)[3])

    def _projection(self, n_in: int) -> np.ndarray:
        if n_in not in self._proj:
            rng = np.random.default_rng(np.random.SeedSequence(0xF17E, spawn_key=(n_in,)))
            self._proj[n_in] = rng.standard_normal((self.dim - 3, n_in)) / math.sqrt(n_in)
        return self._proj[n_in]

    def image_embed(self, frame) -> np.ndarray:
        x = np.asarray(frame, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        c, h, w = x.shape
        g = self.grid
        hs = np.linspace(0, h, g + 1).astype(int)
        ws = np.linspace(0, w, g + 1).astype(int)
        stats = []
        for i in range(g):
            for j in range(g):
                cell = x[:, hs[i] : max(hs[i + 1], hs[i] + 1), ws[j] : max(ws[j + 1], ws[j] + 1)]
                stats.append(cell.mean(axis=(1, 2)) - 0.5)
        stats.append(x.std(axis=(1, 2)))
        feat = np.concatenate(stats)
        v = np.empty(self.dim)
        rgb = x.mean(axis=(1, 2)) if c == 3 else np.repeat(x.mean(), 3)
        v[:3] = 4.0 * (rgb - 0.5)
        v[3:] = self._projection(feat.size) @ feat + 0.05
        return _unit(v)


class HttpFeatureProvider:
    """Client for an external provider speaking the JSON protocol of ``serve_provider``."""

    def __init__(self, url: str, timeout: float = 30.0, retries: int = 2, backoff: float = 0.5):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.provider_id = None
        self.version = None

    def _call(self, op: str, payload: str):
        last = None
        for attempt in range(self.retries + 1):
            try:
                r = requests.post(self.url, json={"op": op, "payload": payload}, timeout=self.timeout)
                r.raise_for_status()
                body = r.json()
                self.provider_id = body.get("provider_id")
                self.version = body.get("version")
                key = "matrix" if op == "patch_features" else "vector"
                out = np.asarray(body[key], dtype=np.float64)
                if not np.all(np.isfinite(out)):
                    raise ProviderError(f"{op}: non-finite values from provider")
                return out
            except (requests.RequestException, ValueError, KeyError) as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * 2**attempt)
        raise ProviderError(f"{op} failed at {self.url}: {last}")

    def image_embed(self, frame):
        return _unit(self._call("image_embed", base64.b64encode(png_bytes(frame)).decode("ascii")))

    def text_embed(self, text):
        return _unit(self._call("text_embed", base64.b64encode(str(text).encode("utf-8")).decode("ascii")))

    def patch_features(self, frame):
        m = self._call("patch_features", base64.b64encode(png_bytes(frame)).decode("ascii"))
        if m.ndim != 2:
            raise ProviderError("patch_features must return a matrix")
        return m


def serve_provider(provider, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Expose ``provider`` over HTTP in a daemon thread; returns the running server."""

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def do_POST(self):
            try:
                body = json.loads(self.rfile.read(int(self.headers.get("Content-Length", 0))))
                op, raw = body["op"], base64.b64decode(body["payload"])
                if op == "text_embed":
                    out = {"vector": provider.text_embed(raw.decode("utf-8")).tolist()}
                elif op == "image_embed":
                    out = {"vector": provider.image_embed(frame_from_png_bytes(raw)).tolist()}
                elif op == "patch_features":
                    out = {"matrix": provider.patch_features(frame_from_png_bytes(raw)).tolist()}
                else:
                    raise ValueError(f"unknown op {op!r}")
                out["provider_id"] = getattr(provider, "provider_id", "unknown")
                out["version"] = getattr(provider, "version", "0")
                data, code = json.dumps(out).encode(), 200
            except Exception as exc:  # report any failure to the client
                data, code = json.dumps({"error": str(exc)}).encode(), 400
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

    server = ThreadingHTTPServer((host, port), Handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server


def make_provider(spec: str | None):
    """``builtin`` (or None) gives the built-in provider; ``http:URL`` an HTTP client."""
    if spec is None or spec == "builtin":
        return BuiltinFeatureProvider()
    if spec.startswith("http:") and not spec.startswith("http://"):
        spec = spec[5:]
    if spec.startswith(("http://", "https://")):
        return HttpFeatureProvider(spec)
    raise ValueError(f"unknown provider {spec!r}")


def _blank(frame, mask):
    x = np.array(frame, dtype=np.float64)
    if mask is not None:
        m = np.asarray(mask).astype(bool)
        if m.shape != x.shape[-2:]:
            raise ValueError(f"mask shape {m.shape} does not match frame {x.shape[-2:]}")
        x[..., m] = 0.0
    return x


def perceptual_distance(src, edit, mask, provider) -> float:
    """Mean per-patch L2 between features of the two frames with the edit region blanked."""
    fs = np.asarray(provider.patch_features(_blank(src, mask)))
    fe = np.asarray(provider.patch_features(_blank(edit, mask)))
    if fs.shape != fe.shape or fs.ndim != 2 or fs.shape[0] == 0:
        raise ProviderError(f"patch feature shapes differ or are empty: {fs.shape} vs {fe.shape}")
    return math.fsum(np.linalg.norm(fs - fe, axis=1)) / fs.shape[0]


def self_similarity(feats) -> np.ndarray:
    """Cosine similarity between all patch pairs; zero-norm patches get similarity 0."""
    f = np.asarray(feats, dtype=np.float64)
    n = np.linalg.norm(f, axis=1)
    safe = np.where(n > 0, n, 1.0)
    u = f / safe[:, None]
    u[n == 0] = 0.0
    return u @ u.T


def structure_distance_frame(fs, fe) -> float:
    ss, se = self_similarity(fs), self_similarity(fe)
    if ss.shape != se.shape:
        raise ProviderError("patch counts differ between source and edit")
    return float(np.linalg.norm(ss - se) / ss.shape[0])


def structure_distance(src_frames, edit_frames, provider) -> float:
    if len(src_frames) != len(edit_frames) or len(src_frames) == 0:
        raise ValueError("need equally many (>0) source and edit frames")
    vals = [structure_distance_frame(provider.patch_features(a), provider.patch_features(b))
            for a, b in zip(src_frames, edit_frames)]
    return math.fsum(vals) / len(vals)


def mask_bbox(mask, pad: float = 0.1):
    """Padded bounding box (y0, y1, x0, x1) of the mask, or None when it is empty."""
    m = np.asarray(mask).astype(bool)
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        return None
    h, w = m.shape
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    py = int(math.ceil(pad * (y1 - y0)))
    px = int(math.ceil(pad * (x1 - x0)))
    return max(0, y0 - py), min(h, y1 + py), max(0, x0 - px), min(w, x1 + px)


def clip_similarity(frames, text, provider, masks=None, pad: float = 0.1) -> float:
    """Mean cosine between each frame (or its padded mask crop) and the text embedding."""
    if len(frames) == 0:
        raise ValueError("no frames")
    t = _unit(provider.text_embed(text))
    vals = []
    for i, f in enumerate(frames):
        f = np.asarray(f, dtype=np.float64)
        if masks is not None:
            box = mask_bbox(masks[i], pad)
            if box is None:
                warnings.warn(f"empty mask at frame {i}; using the full frame", MaskFallbackWarning)
            else:
                y0, y1, x0, x1 = box
                f = f[..., y0:y1, x0:x1]
        vals.append(float(_unit(provider.image_embed(f)) @ t))
    return math.fsum(vals) / len(vals)
