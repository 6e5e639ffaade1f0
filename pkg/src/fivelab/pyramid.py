"""Pyramidal multi-resolution rectified flow and windowed FlowEdit across stages.

Stage k works at resolution full / 2**k inside the time window [s_k, e_k]. Stages
run from the coarsest (k = K-1) to full resolution (k = 0). Between stages the
latents are upsampled, rescaled by s_{k-1}/e_k and topped up with corrective
noise so the per-entry marginal variance stays on the flow path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .flowedit import EditTrajectory, velocity_delta
from .rf_core import NULL_ID, Condition, NonFiniteError, TimeGrid, as_latent, make_rng

ALPHA_TOL = 1e-12


def down(x, factor: int) -> np.ndarray:
    """Mean-pool the last two axes by ``factor`` (a power of two; 1 is the identity)."""
    x = np.asarray(x, dtype=np.float64)
    if factor == 1:
        return x
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"spatial dims {(h, w)} not divisible by {factor}")
    return x.reshape(*x.shape[:-2], h // factor, factor, w // factor, factor).mean(axis=(-3, -1))


def up(x, factor: int = 2) -> np.ndarray:
    """Nearest-neighbour upsampling of the last two axes."""
    x = np.asarray(x, dtype=np.float64)
    if factor == 1:
        return x
    return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)


@dataclass
class StageSchedule:
    """Windows listed from the coarsest stage (k = K-1) to full resolution (k = 0).

    ``resample="none"`` keeps every stage at full resolution (Down/Up become the
    identity), which turns the pyramid into pure time-windowing.
    """

    windows: list
    steps: list
    skip: list
    resample: str = "pool"

    def __post_init__(self):
        self.windows = [tuple(float(v) for v in w) for w in self.windows]
        self.steps = [int(s) for s in self.steps]
        self.skip = [int(s) for s in self.skip]
        self.validate()

    @property
    def K(self) -> int:
        return len(self.windows)

    def stage_order(self) -> list[int]:
        return list(range(self.K - 1, -1, -1))

    def _pos(self, k: int) -> int:
        if not 0 <= k < self.K:
            raise ValueError(f"stage {k} outside 0..{self.K - 1}")
        return self.K - 1 - k

    def window(self, k: int) -> tuple[float, float]:
        return self.windows[self._pos(k)]

    def stage_steps(self, k: int) -> tuple[int, int]:
        p = self._pos(k)
        return self.steps[p], self.skip[p]

    def factor(self, k: int) -> int:
        return 1 if self.resample == "none" else 2**k

    def ratio(self, k: int) -> float:
        """Rescaling s_{k-1}/e_k applied when leaving stage k."""
        return self.window(k - 1)[0] / self.window(k)[1]

    def alpha_sq(self, k: int) -> float:
        s_next = self.window(k - 1)[0]
        e = self.window(k)[1]
        return (1.0 - s_next) ** 2 - (s_next / e) ** 2 * (1.0 - e) ** 2

    def alpha(self, k: int) -> float:
        a2 = self.alpha_sq(k)
        if a2 < -ALPHA_TOL:
            raise ValueError(f"invalid transition out of stage {k}: alpha^2 = {a2:.6g} < 0")
        return math.sqrt(max(a2, 0.0))

    def validate(self) -> None:
        if self.resample not in ("pool", "none"):
            raise ValueError(f"unknown resample mode {self.resample!r}")
        if not (len(self.windows) == len(self.steps) == len(self.skip)) or not self.windows:
            raise ValueError("windows, steps and skip must be non-empty and of equal length")
        for (s, e), n, sk in zip(self.windows, self.steps, self.skip):
            if not 0.0 <= s < e <= 1.0:
                raise ValueError(f"window ({s}, {e}) must satisfy 0 <= s < e <= 1")
            if n < 1 or not 0 <= sk <= n:
                raise ValueError(f"bad step/skip counts ({n}, {sk})")
        if self.windows[-1][1] != 1.0:
            raise ValueError("the full-resolution window must end at t = 1")
        for k in range(self.K - 1, 0, -1):
            self.alpha(k)

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "windows": [list(w) for w in self.windows],
            "steps": self.steps,
            "skip": self.skip,
            "ratios": [self.ratio(k) for k in range(self.K - 1, 0, -1)],
            "resample": self.resample,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageSchedule":
        sched = cls(d["windows"], d["steps"], d["skip"], d.get("resample", "pool"))
        if "K" in d and d["K"] != sched.K:
            raise ValueError(f"K={d['K']} but {sched.K} windows given")
        if "ratios" in d:
            expect = [sched.ratio(k) for k in range(sched.K - 1, 0, -1)]
            if len(d["ratios"]) != len(expect) or not np.allclose(d["ratios"], expect, rtol=0, atol=1e-9):
                raise ValueError(f"ratios {d['ratios']} disagree with windows (expected {expect})")
        return sched

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "StageSchedule":
        return cls.from_dict(json.loads(Path(path).read_text()))


DEFAULT_WINDOWS = [(0.0, 1.0 / 3.0), (0.30, 2.0 / 3.0), (0.60, 1.0)]


def default_schedule(first_frame: bool = True) -> StageSchedule:
    """Three stages; 20 steps per stage for the first frame, 10 afterwards; coarsest stage skipped."""
    n = 20 if first_frame else 10
    return StageSchedule(DEFAULT_WINDOWS, [n, n, n], [n, 0, 0])


def single_stage_schedule(steps: int, skip: int) -> StageSchedule:
    return StageSchedule([(0.0, 1.0)], [steps], [skip])


def rescaled_time(t: float, s_k: float, e_k: float) -> float:
    if not s_k <= t <= e_k:
        raise ValueError(f"t={t} outside window [{s_k}, {e_k}]")
    return (t - s_k) / (e_k - s_k)


def _upsampled_coarse(x1, k: int, schedule: StageSchedule) -> np.ndarray:
    f = schedule.factor(k)
    if schedule.resample == "none":
        return np.asarray(x1, dtype=np.float64)
    return up(down(x1, 2 * f), 2)


def window_endpoints(x0, x1, k: int, schedule: StageSchedule):
    """Start/end points of window k for noise ``x0`` (stage resolution) and clean ``x1`` (full resolution)."""
    s, e = schedule.window(k)
    x0 = np.asarray(x0, dtype=np.float64)
    fine = down(x1, schedule.factor(k))
    if x0.shape != fine.shape:
        raise ValueError(f"stage-{k} noise has shape {x0.shape}, expected {fine.shape}")
    coarse = _upsampled_coarse(x1, k, schedule) if s > 0 else np.zeros_like(fine)
    xs = (1.0 - s) * x0 + s * coarse
    xe = (1.0 - e) * x0 + e * fine
    return xs, xe


def stage_transition(x_e, schedule: StageSchedule, k: int, rng: np.random.Generator | None = None,
                     noise=None) -> np.ndarray:
    """Map the end state of stage k to the start of stage k-1 (one level finer)."""
    if k < 1:
        raise ValueError("stage 0 has no successor")
    alpha = schedule.alpha(k)
    x_up = up(x_e, 2) if schedule.resample == "pool" else np.asarray(x_e, dtype=np.float64)
    if noise is None:
        if rng is None:
            raise ValueError("need rng or explicit noise")
        noise = rng.standard_normal(x_up.shape)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x_up.shape:
        raise ValueError(f"corrective noise shape {noise.shape} != {x_up.shape}")
    return schedule.ratio(k) * x_up + alpha * noise


def estimate_edit_endpoint(x_s_edit, x_s_src, xe_src) -> np.ndarray:
    x_s_edit, x_s_src, xe_src = (np.asarray(a, dtype=np.float64) for a in (x_s_edit, x_s_src, xe_src))
    if not x_s_edit.shape == x_s_src.shape == xe_src.shape:
        raise ValueError("estimate_edit_endpoint: shape mismatch")
    return x_s_edit + (xe_src - x_s_src)


class AnalyticPyramidField:
    """Exact window field for point-mass targets.

    On window k a state x = (1-t_k) xs + t_k xe determines the noise
    X0 = (x - m(t_k)) / (1 - t) with m(t_k) = (1-t_k) s Up(Down(mu, 2^{k+1})) + t_k e Down(mu, 2^k)
    and global t = s + t_k (e - s); the velocity (in rescaled time) is xe - xs.
    """

    def __init__(self, means: dict, schedule: StageSchedule, null_mean=None, history_offset=None,
                 t_eps: float = 1e-12):
        self.means = {k: np.asarray(v, dtype=np.float64) for k, v in means.items()}
        self.schedule = schedule
        self.null_mean = null_mean
        self.history_offset = history_offset
        self.t_eps = t_eps

    def _stage_mean(self, cond: Condition, k: int, shape) -> np.ndarray:
        if self.history_offset is not None and cond.history:
            return np.asarray(cond.history[-1], dtype=np.float64).reshape(shape) + self.history_offset
        if cond.id == NULL_ID:
            if self.null_mean is None:
                return np.zeros(shape)
            mu = np.asarray(self.null_mean, dtype=np.float64)
        else:
            try:
                mu = self.means[cond.id]
            except KeyError:
                raise KeyError(f"no analytic mean for condition {cond.id!r}") from None
        if cond.frame is not None and mu.shape[0] > 1:
            mu = mu[cond.frame : cond.frame + 1]
        return np.broadcast_to(down(mu, self.schedule.factor(k)), shape)

    def velocity(self, x, t_k, cond, stage=None):
        k = 0 if stage is None else stage
        x = np.asarray(x, dtype=np.float64)
        s, e = self.schedule.window(k)
        m_e = self._stage_mean(cond, k, x.shape)
        if s > 0:
            m_s = up(down(m_e, 2), 2) if self.schedule.resample == "pool" else m_e
        else:
            m_s = np.zeros_like(m_e)
        t = s + t_k * (e - s)
        m = (1.0 - t_k) * s * m_s + t_k * e * m_e
        x0 = (x - m) / max(1.0 - t, self.t_eps)
        return -(e - s) * x0 + e * m_e - s * m_s


@dataclass
class StageState:
    k: int
    x0: np.ndarray
    xs_src: np.ndarray
    xe_src: np.ndarray
    x_src: np.ndarray
    x_edit: np.ndarray


def pyramid_edit_window(model, state: StageState, x1_src, schedule: StageSchedule, c_src: Condition,
                        c_tgt: Condition, cfg_src: float, cfg_tgt: float, rng: np.random.Generator,
                        n_avg: int = 1, record: list | None = None) -> StageState:
    """Run FlowEdit inside window k anchored at the window endpoint of the source path.

    Each retained step draws fresh noise for the window start, builds the source point
    on the line from that start to the anchor, and moves the edit state by vΔ dt.
    """
    k = state.k
    s, e = schedule.window(k)
    steps, skip = schedule.stage_steps(k)
    grid = TimeGrid.uniform(steps, skip)
    anchor = state.xe_src
    coarse = _upsampled_coarse(x1_src, k, schedule) if s > 0 else np.zeros_like(anchor)
    x = state.x_edit
    for n, t_k, dt in grid.retained():
        deltas = []
        for _ in range(n_avg):
            noise = rng.standard_normal(anchor.shape)
            start = (1.0 - s) * noise + s * coarse
            x_src = (1.0 - t_k) * start + t_k * anchor
            dv, _ = velocity_delta(model, x, x_src, anchor, t_k, c_src, c_tgt, cfg_src, cfg_tgt, stage=k)
            deltas.append(dv)
        dv = deltas[0] if n_avg == 1 else np.mean(deltas, axis=0)
        if not np.all(np.isfinite(dv)):
            raise NonFiniteError(f"velocity difference non-finite in stage {k}", step=n)
        x = x + dv * dt
        if record is not None:
            record.append((s + (t_k + dt) * (e - s), float(np.linalg.norm(dv)), x))
    return replace(state, x_edit=x, x_src=anchor)


@dataclass
class PyramidSession:
    model: object
    x1_src: np.ndarray
    c_src: Condition
    c_tgt: Condition
    schedule_first: StageSchedule = field(default_factory=lambda: default_schedule(True))
    schedule_next: StageSchedule = field(default_factory=lambda: default_schedule(False))
    cfg_src_first: float = 7.0
    cfg_src_next: float = 5.0
    cfg_tgt: float = 10.0
    seed: int = 0
    history_len: int = 1
    n_avg: int = 1
    per_frame_conditions: bool = False
    keep_states: bool = False

    def __post_init__(self):
        self.x1_src = as_latent(self.x1_src)
        for sched in (self.schedule_first, self.schedule_next):
            f = sched.factor(sched.K - 1)
            if self.x1_src.shape[-1] % f or self.x1_src.shape[-2] % f:
                raise ValueError(f"latent spatial dims must be divisible by {f}")


def _history(frames: list, k: int, schedule: StageSchedule, length: int) -> tuple | None:
    if not frames or length <= 0:
        return None
    return tuple(down(f, schedule.factor(k)) for f in frames[-length:])


def edit_frame(session: PyramidSession, i: int, src_hist: list, edit_hist: list) -> EditTrajectory:
    sched = session.schedule_first if i == 0 else session.schedule_next
    cfg_src = session.cfg_src_first if i == 0 else session.cfg_src_next
    x1 = session.x1_src[i : i + 1]
    step_rng = make_rng(session.seed, i)
    stage_rng = make_rng(session.seed, i, 1)
    frame = i if session.per_frame_conditions else None
    record: list = []
    traj = EditTrajectory(times=[], states=[])
    state = None
    for k in sched.stage_order():
        x0 = stage_rng.standard_normal(down(x1, sched.factor(k)).shape)
        xs_bar, xe_bar = window_endpoints(x0, x1, k, sched)
        if state is None:
            x_src, x_edit = xe_bar, xe_bar.copy()
        else:
            corr = stage_rng.standard_normal(up(state.x_src, 2).shape if sched.resample == "pool" else state.x_src.shape)
            x_src = stage_transition(state.x_src, sched, k + 1, noise=corr)
            x_s_edit = stage_transition(state.x_edit, sched, k + 1, noise=corr)
            x_edit = estimate_edit_endpoint(x_s_edit, x_src, xe_bar)
        if not traj.times:
            traj.times.append(sched.window(k)[0])
            traj.states.append(x_edit.copy())
        state = StageState(k, x0, xs_bar, xe_bar, x_src, x_edit)
        c_src = replace(session.c_src, frame=frame).with_history(_history(src_hist, k, sched, session.history_len))
        c_tgt = replace(session.c_tgt, frame=frame).with_history(_history(edit_hist, k, sched, session.history_len))
        start = len(record)
        state = pyramid_edit_window(session.model, state, x1, sched, c_src, c_tgt, cfg_src, session.cfg_tgt,
                                    step_rng, n_avg=session.n_avg, record=record)
        for t, norm, x in record[start:]:
            traj.times.append(t)
            traj.dv_norms.append(norm)
            if session.keep_states:
                traj.states.append(x.copy())
    if not (session.keep_states and record and record[-1][2] is state.x_edit):
        traj.states.append(state.x_edit)
    return traj


def pyramid_edit_run(session: PyramidSession) -> list[EditTrajectory]:
    """Edit frames autoregressively; source and edited histories condition the two velocities."""
    src_hist: list = []
    edit_hist: list = []
    out = []
    for i in range(session.x1_src.shape[0]):
        traj = edit_frame(session, i, src_hist, edit_hist)
        out.append(traj)
        src_hist.append(session.x1_src[i : i + 1])
        edit_hist.append(traj.final)
    return out


def stack_final(trajs: list[EditTrajectory]) -> np.ndarray:
    return np.concatenate([t.final for t in trajs], axis=0)
