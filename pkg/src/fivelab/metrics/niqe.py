"""Naturalness distance from natural-scene statistics (NIQE-style).

Each patch yields 18 features per scale (GGD fit of the MSCN coefficients and
AGGD fits of four neighbour products), two scales, 36 features in total. A
frame's score is the Mahalanobis-like distance between its fitted Gaussian and
the pristine one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import gamma as G

_GAM = np.arange(0.2, 10.0, 0.001)
_R_GGD = G(1 / _GAM) * G(3 / _GAM) / G(2 / _GAM) ** 2
_R_AGGD = G(2 / _GAM) ** 2 / (G(1 / _GAM) * G(3 / _GAM))
_EPS = 1e-12
RIDGE = 1e-6
COND_LIMIT = 1e10


def to_luma(frame) -> np.ndarray:
    """Luminance on a 0..255 scale from a (C,H,W) [0,1] frame or (H,W) array."""
    x = np.asarray(frame, dtype=np.float64)
    if x.ndim == 3:
        x = 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2] if x.shape[0] == 3 else x.mean(axis=0)
    return 255.0 * x


def mscn(img, sigma: float = 7 / 6) -> np.ndarray:
    mu = gaussian_filter(img, sigma, mode="nearest", truncate=3.0)
    var = gaussian_filter(img * img, sigma, mode="nearest", truncate=3.0) - mu * mu
    return (img - mu) / (np.sqrt(np.abs(var)) + 1.0)


def fit_ggd(x):
    x = np.ravel(x)
    sigma_sq = float(np.mean(x * x))
    e = float(np.mean(np.abs(x)))
    rho = sigma_sq / (e * e + _EPS)
    alpha = _GAM[np.argmin(np.abs(rho - _R_GGD))]
    return float(alpha), sigma_sq


def fit_aggd(x):
    x = np.ravel(x)
    left, right = x[x < 0], x[x > 0]
    lsig = math.sqrt(np.mean(left * left)) if left.size else 0.0
    rsig = math.sqrt(np.mean(right * right)) if right.size else 0.0
    gh = lsig / (rsig + _EPS)
    rhat = float(np.mean(np.abs(x))) ** 2 / (float(np.mean(x * x)) + _EPS)
    rnorm = rhat * (gh**3 + 1) * (gh + 1) / (gh * gh + 1) ** 2
    alpha = float(_GAM[np.argmin(np.abs(_R_AGGD - rnorm))])
    scale = math.sqrt(G(1 / alpha) / G(3 / alpha))
    mean = (rsig - lsig) * scale * G(2 / alpha) / G(1 / alpha)
    return alpha, mean, lsig * lsig, rsig * rsig


def _patch_feats(m):
    a, s = fit_ggd(m)
    out = [a, s]
    for sh in ((0, 1), (1, 0), (1, 1), (1, -1)):
        out.extend(fit_aggd(m * np.roll(m, sh, axis=(0, 1))))
    return out


def _scale_feats(img, patch):
    m = mscn(img)
    h, w = m.shape
    rows = []
    for i in range(0, h - patch + 1, patch):
        for j in range(0, w - patch + 1, patch):
            rows.append(_patch_feats(m[i : i + patch, j : j + patch]))
    return np.asarray(rows)


def patch_features(frame, patch: int = 16) -> np.ndarray:
    """(n_patches, 36) feature matrix at full and half resolution."""
    img = to_luma(frame)
    h, w = img.shape
    if h < patch or w < patch or patch % 2:
        raise ValueError(f"patch {patch} must be even and fit a {h}x{w} frame")
    f1 = _scale_feats(img, patch)
    h2, w2 = (h // 2) * 2, (w // 2) * 2
    half = img[:h2, :w2].reshape(h2 // 2, 2, w2 // 2, 2).mean(axis=(1, 3))
    f2 = _scale_feats(half, patch // 2)
    n = min(len(f1), len(f2))
    return np.hstack([f1[:n], f2[:n]])


@dataclass
class PristineModel:
    nu: np.ndarray
    sigma: np.ndarray
    patch: int = 16

    def to_json(self) -> dict:
        return {"nu": self.nu.tolist(), "sigma": self.sigma.tolist(), "patch": self.patch}

    @classmethod
    def from_json(cls, obj) -> "PristineModel":
        nu = np.asarray(obj["nu"], dtype=np.float64)
        sigma = np.asarray(obj["sigma"], dtype=np.float64).reshape(nu.size, nu.size)
        return cls(nu, sigma, int(obj.get("patch", 16)))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "PristineModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def fit_gaussian(feats):
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError("need at least two feature rows")
    return f.mean(axis=0), np.atleast_2d(np.cov(f, rowvar=False))


def fit_pristine_model(frames, patch: int = 16) -> PristineModel:
    feats = np.vstack([patch_features(f, patch) for f in frames])
    nu, sigma = fit_gaussian(feats)
    return PristineModel(nu, sigma, patch)


def gaussian_distance(nu1, sigma1, nu2, sigma2) -> float:
    """sqrt(d^T ((S1+S2)/2)^-1 d); a small ridge is added only for ill-conditioned pools."""
    d = np.atleast_1d(np.asarray(nu1, dtype=np.float64) - np.asarray(nu2, dtype=np.float64))
    pooled = (np.atleast_2d(sigma1) + np.atleast_2d(sigma2)) / 2.0
    if not np.isfinite(np.linalg.cond(pooled)) or np.linalg.cond(pooled) > COND_LIMIT:
        scale = max(np.trace(pooled) / pooled.shape[0], 1.0)
        pooled = pooled + RIDGE * scale * np.eye(pooled.shape[0])
    q = float(d @ np.linalg.solve(pooled, d))
    return math.sqrt(max(q, 0.0))


def niqe_frame(frame, model: PristineModel) -> float:
    nu2, s2 = fit_gaussian(patch_features(frame, model.patch))
    return gaussian_distance(model.nu, model.sigma, nu2, s2)


def niqe(frames, model: PristineModel) -> float:
    if len(frames) == 0:
        raise ValueError("no frames")
    vals = sorted(niqe_frame(f, model) for f in frames)
    return math.fsum(vals) / len(vals)
