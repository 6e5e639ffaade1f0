"""Motion fidelity between point tracklets, plus a small block-matching tracker."""

from __future__ import annotations

import math

import numpy as np

from .niqe import to_luma


def _check_tracklet(tr) -> np.ndarray:
    a = np.asarray(tr, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValueError(f"tracklet must be (T,2), got {a.shape}")
    if a.shape[0] < 2:
        raise ValueError("tracklet needs at least 2 points")
    return a


def displacement_correlation(a, b) -> float:
    """Mean over steps of the cosine between displacement vectors.

    A step where both points stay put counts as 1; a step where only one moves counts as 0.
    """
    a, b = _check_tracklet(a), _check_tracklet(b)
    if a.shape != b.shape:
        raise ValueError("tracklets must have the same length")
    da, db = np.diff(a, axis=0), np.diff(b, axis=0)
    na, nb = np.linalg.norm(da, axis=1), np.linalg.norm(db, axis=1)
    vals = []
    for u, v, nu, nv in zip(da, db, na, nb):
        if nu == 0.0 and nv == 0.0:
            vals.append(1.0)
        elif nu == 0.0 or nv == 0.0:
            vals.append(0.0)
        else:
            vals.append(min(1.0, max(-1.0, float(u @ v) / (nu * nv))))
    return math.fsum(vals) / len(vals)


def _directed(query, reference) -> float:
    best = [max(displacement_correlation(q, r) for r in reference) for q in query]
    return math.fsum(best) / len(best)


def motion_fidelity(src_tracklets, edit_tracklets, symmetric: bool = False) -> float:
    """For every edit tracklet take its best-matching source tracklet; average."""
    if len(src_tracklets) == 0 or len(edit_tracklets) == 0:
        raise ValueError("both tracklet sets must be non-empty")
    score = _directed(edit_tracklets, src_tracklets)
    if symmetric:
        score = 0.5 * (score + _directed(src_tracklets, edit_tracklets))
    return score


def track_points(frames, starts, radius: int = 3, search: int = 3) -> np.ndarray:
    """Follow integer start points through the video by SSD block matching.

    Returns (N, T, 2) array of (x, y). Ties go to the smallest displacement, so a
    static textured scene yields perfectly still tracks.
    """
    frames = [to_luma(f) for f in frames]
    h, w = frames[0].shape
    offs = [(dx, dy) for dy in range(-search, search + 1) for dx in range(-search, search + 1)]
    offs.sort(key=lambda o: (o[0] ** 2 + o[1] ** 2, o[1], o[0]))
    out = np.zeros((len(starts), len(frames), 2))
    for n, (x, y) in enumerate(starts):
        x, y = int(x), int(y)
        out[n, 0] = (x, y)
        for k in range(1, len(frames)):
            prev, cur = frames[k - 1], frames[k]
            x0, x1 = max(0, x - radius), min(w, x + radius + 1)
            y0, y1 = max(0, y - radius), min(h, y + radius + 1)
            tpl = prev[y0:y1, x0:x1]
            best, best_off = None, (0, 0)
            for dx, dy in offs:
                if x0 + dx < 0 or x1 + dx > w or y0 + dy < 0 or y1 + dy > h:
                    continue
                d = cur[y0 + dy : y1 + dy, x0 + dx : x1 + dx] - tpl
                ssd = float(np.sum(d * d))
                if best is None or ssd < best:
                    best, best_off = ssd, (dx, dy)
            x, y = x + best_off[0], y + best_off[1]
            out[n, k] = (x, y)
    return out
