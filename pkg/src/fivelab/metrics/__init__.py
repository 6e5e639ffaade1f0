"""Evaluation metrics: background preservation, feature distances, quality and motion."""

from __future__ import annotations

import math

from .background import NoBackgroundError, masked_mse, masked_psnr, masked_ssim, psnr_from_mse
from .features import (
    BuiltinFeatureProvider,
    HttpFeatureProvider,
    MaskFallbackWarning,
    ProviderError,
    clip_similarity,
    make_provider,
    mask_bbox,
    perceptual_distance,
    serve_provider,
    structure_distance,
)
from .motion import displacement_correlation, motion_fidelity, track_points
from .niqe import PristineModel, fit_pristine_model, gaussian_distance, niqe


def sample_frames(n_frames: int, stride: int = 8) -> list[int]:
    """Indices 0, stride, 2*stride, ... below ``n_frames``."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if n_frames < 1:
        raise ValueError("empty video")
    return list(range(0, n_frames, stride))


def runtime_per_frame(elapsed: float, n_frames: int) -> float:
    if n_frames <= 0:
        raise ValueError("zero frames")
    return elapsed / n_frames


def frame_mean(fn, src_frames, edit_frames, masks=None, indices=None) -> float:
    """Average a per-frame kernel over the chosen frame indices with exact summation."""
    idx = range(len(src_frames)) if indices is None else indices
    vals = [fn(src_frames[i], edit_frames[i], None if masks is None else masks[i]) for i in idx]
    if not vals:
        raise ValueError("no frames selected")
    return math.fsum(vals) / len(vals)


__all__ = [
    "BuiltinFeatureProvider", "HttpFeatureProvider", "MaskFallbackWarning", "NoBackgroundError",
    "PristineModel", "ProviderError", "clip_similarity", "displacement_correlation",
    "fit_pristine_model", "frame_mean", "gaussian_distance", "make_provider", "mask_bbox",
    "masked_mse", "masked_psnr", "masked_ssim", "motion_fidelity", "niqe", "perceptual_distance",
    "psnr_from_mse", "runtime_per_frame", "sample_frames", "serve_provider", "structure_distance",
    "track_points",
]
