"""Inversion-free FlowEdit: single latents, frame-by-frame video, and joint multi-frame editing.

The edit state starts at the clean source latent and is pushed by the difference
between target- and source-conditioned velocities. The source latent is never
inverted; noisy source points are built by interpolation with fresh noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._io import encode_array
from .rf_core import Condition, NonFiniteError, TimeGrid, as_latent, guided_velocity, make_rng

DEFAULT_STEPS = 50
DEFAULT_SKIP = 15
DEFAULT_CFG_SRC = 5.0
DEFAULT_CFG_TGT = 12.0


@dataclass
class EditSession:
    model: object
    x1_src: np.ndarray
    c_src: Condition
    c_tgt: Condition
    grid: TimeGrid = field(default_factory=lambda: TimeGrid.uniform(DEFAULT_STEPS, DEFAULT_SKIP))
    cfg_src: float = DEFAULT_CFG_SRC
    cfg_tgt: float = DEFAULT_CFG_TGT
    seed: int = 0
    n_avg: int = 1
    stream: int = 0
    keep_states: bool = True
    keep_aux: bool = False

    def __post_init__(self):
        self.x1_src = as_latent(self.x1_src)
        if self.cfg_src < 0 or self.cfg_tgt < 0:
            raise ValueError("CFG scales must be >= 0")
        if self.n_avg < 1:
            raise ValueError("n_avg must be >= 1")

    def rng(self) -> np.random.Generator:
        return make_rng(self.seed, self.stream)


@dataclass
class EditTrajectory:
    times: list
    states: list
    dv_norms: list = field(default_factory=list)
    aux: list = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def source_latent_at(session: EditSession, t: float, noise) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != session.x1_src.shape:
        raise ValueError(f"noise shape {noise.shape} does not match source {session.x1_src.shape}")
    return (1.0 - t) * noise + t * session.x1_src


def target_estimate(x_edit_prev, x_src_t, x1_src) -> np.ndarray:
    x_edit_prev, x_src_t, x1_src = (np.asarray(a, dtype=np.float64) for a in (x_edit_prev, x_src_t, x1_src))
    if not x_edit_prev.shape == x_src_t.shape == x1_src.shape:
        raise ValueError("target_estimate: shape mismatch")
    return x_edit_prev + x_src_t - x1_src


def velocity_delta(model, x_edit_prev, x_src_t, anchor, t, c_src, c_tgt, cfg_src, cfg_tgt, stage=None):
    """One-draw vΔ = v(X̂_tgt; c_tgt) - v(X_src; c_src) with X̂_tgt = edit + X_src - anchor."""
    x_tgt = target_estimate(x_edit_prev, x_src_t, anchor)
    v_tgt = guided_velocity(model, x_tgt, t, c_tgt, cfg_tgt, stage=stage)
    v_src = guided_velocity(model, x_src_t, t, c_src, cfg_src, stage=stage)
    return v_tgt - v_src, x_tgt


def _step(session: EditSession, x_edit_prev, t, dt, noises):
    deltas, aux = [], []
    for noise in noises:
        x_src = source_latent_at(session, t, noise)
        dv, x_tgt = velocity_delta(session.model, x_edit_prev, x_src, session.x1_src, t,
                                   session.c_src, session.c_tgt, session.cfg_src, session.cfg_tgt)
        deltas.append(dv)
        aux.append((x_src, x_tgt))
    dv = deltas[0] if len(deltas) == 1 else np.mean(deltas, axis=0)
    if not np.all(np.isfinite(dv)):
        raise NonFiniteError(f"velocity difference is non-finite at t={t}")
    return x_edit_prev + dv * dt, dv, aux


def flowedit_step(session: EditSession, x_edit_prev, t: float, dt: float, noise) -> np.ndarray:
    """One Euler update of the edit state; ``noise`` is one array or a list of ``n_avg`` draws."""
    noises = [noise] if isinstance(noise, np.ndarray) else list(noise)
    return _step(session, np.asarray(x_edit_prev, dtype=np.float64), t, dt, noises)[0]


def flowedit_run(session: EditSession) -> EditTrajectory:
    rng = session.rng()
    x = session.x1_src.copy()
    t0 = float(session.grid.times[session.grid.skip_count])
    traj = EditTrajectory(times=[t0], states=[x.copy()])
    for n, t, dt in session.grid.retained():
        noises = [rng.standard_normal(x.shape) for _ in range(session.n_avg)]
        try:
            x, dv, aux = _step(session, x, t, dt, noises)
        except NonFiniteError as exc:
            raise NonFiniteError(str(exc), step=n) from exc
        traj.times.append(t + dt)
        traj.dv_norms.append(float(np.linalg.norm(dv)))
        if session.keep_states:
            traj.states.append(x.copy())
        if session.keep_aux:
            traj.aux.append({"t": t, "x_src": aux[0][0], "x_tgt": aux[0][1], "v_delta": dv})
    if not session.keep_states:
        traj.states.append(x)
    return traj


def joint_edit_run(session: EditSession) -> EditTrajectory:
    """Edit all frames of an (F, C, H, W) latent as one state with a sequence-aware model."""
    if session.c_src.frame is not None or session.c_tgt.frame is not None:
        raise ValueError("joint editing conditions must not select a single frame")
    return flowedit_run(session)


def framewise_edit_run(session: EditSession) -> list[EditTrajectory]:
    """Plain FlowEdit applied independently to every frame (each frame has its own noise stream)."""
    out = []
    for i in range(session.x1_src.shape[0]):
        s = replace(session, x1_src=session.x1_src[i : i + 1],
                    c_src=replace(session.c_src, frame=i), c_tgt=replace(session.c_tgt, frame=i),
                    stream=i)
        out.append(flowedit_run(s))
    return out


def write_trajectory(traj: EditTrajectory, path, include_states: bool = False) -> None:
    """JSON lines: one record per retained step (step 0 is the initial state)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for i, t in enumerate(traj.times):
            rec = {"step": i, "t": t, "dv_norm": traj.dv_norms[i - 1] if i else 0.0}
            if include_states and i < len(traj.states) and len(traj.states) == len(traj.times):
                rec["state"] = encode_array(traj.states[i])
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
