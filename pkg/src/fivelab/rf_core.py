"""Toy rectified-flow models: linear paths, flow-matching training and guided Euler sampling.

Time runs from 0 (noise) to 1 (data). Models are called as ``velocity(x, t, cond)``
with that same t; no reversed-time argument is passed anywhere in the package.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from ._io import decode_array, encode_array, sha256_of

NULL_ID = "<null>"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """A model output or integration state became NaN/inf."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class NonConvergenceError(RuntimeError):
    def __init__(self, final_loss: float, threshold: float):
        super().__init__(f"training did not converge: final loss {final_loss:.6g} > {threshold:.6g}")
        self.final_loss = final_loss
        self.threshold = threshold


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent, reproducible stream for (seed, key...)."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def as_latent(x) -> np.ndarray:
    """Validate a latent tensor indexed (frame, channel, height, width)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 4 or min(a.shape) < 1:
        raise ValueError(f"latent must have shape (F, C, H, W) with all dims >= 1, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("latent contains non-finite entries")
    return a


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def interpolate_path(x0, x1, t: float) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    _same_shape(x0, x1, "interpolate_path")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return (1.0 - t) * x0 + t * x1


def target_velocity(x0, x1) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    _same_shape(x0, x1, "target_velocity")
    return x1 - x0


@dataclass(frozen=True)
class Condition:
    """A toy prompt.

    ``frame`` selects per-frame targets in analytic fields when a single frame is
    edited on its own; ``history`` carries per-frame latent summaries for
    autoregressive conditioning.
    """

    id: str
    embedding: np.ndarray | None = None
    history: tuple | None = None
    frame: int | None = None

    def null(self) -> "Condition":
        return replace(self, id=NULL_ID, embedding=None)

    def with_history(self, history: Sequence[np.ndarray] | None) -> "Condition":
        return replace(self, history=None if history is None else tuple(history))


@dataclass
class TimeGrid:
    times: np.ndarray
    skip_count: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        t = self.times
        if t.ndim != 1 or t.size < 2:
            raise ValueError("time grid needs at least two points")
        if t[0] < 0.0 or t[-1] > 1.0:
            raise ValueError("grid endpoints must lie in [0, 1]")
        if np.any(np.diff(t) <= 0):
            raise ValueError("grid must be strictly increasing")
        if not 0 <= self.skip_count <= self.n_steps:
            raise ValueError(f"skip_count must be in [0, {self.n_steps}], got {self.skip_count}")

    @classmethod
    def uniform(cls, n_steps: int, skip_count: int = 0, start: float = 0.0, stop: float = 1.0) -> "TimeGrid":
        return cls(np.linspace(start, stop, n_steps + 1), skip_count)

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    def retained(self) -> Iterable[tuple[int, float, float]]:
        """(index, t, dt) for every step that is not skipped."""
        for n in range(self.skip_count, self.n_steps):
            yield n, float(self.times[n]), float(self.times[n + 1] - self.times[n])


class VelocityModel(Protocol):
    def velocity(self, x: np.ndarray, t: float, cond: Condition, stage: int | None = None) -> np.ndarray: ...


class CallCounter:
    """Wraps a model and counts velocity evaluations."""

    def __init__(self, model):
        self.model = model
        self.calls = 0

    def velocity(self, x, t, cond, stage=None):
        self.calls += 1
        return self.model.velocity(x, t, cond, stage=stage)

    def __getattr__(self, name):
        return getattr(self.model, name)


class AnalyticPointMassField:
    """Exact flow-matching field for targets concentrated at one mean per label.

    With ``sigma > 0`` the target is N(mean, sigma^2 I) instead, whose optimal
    field ``mean + a(t) (x - t mean)``, ``a = (t sigma^2 - (1-t)) / ((1-t)^2 + t^2 sigma^2)``
    has curved trajectories (useful for measuring integrator order). ``sigma = 0``
    gives the point-mass field ``(mean - x) / (1 - t)``.

    Means may have a leading frame axis; a condition with ``frame`` set picks
    that frame. With ``history_offset`` set, a condition carrying history uses
    ``history[-1] + history_offset`` as its mean (a history-conditioned field).
    """

    def __init__(self, means: dict, null_mean=None, sigma: float = 0.0, t_eps: float = 1e-12,
                 history_offset=None):
        self.means = {k: np.asarray(v, dtype=np.float64) for k, v in means.items()}
        self.null_mean = None if null_mean is None else np.asarray(null_mean, dtype=np.float64)
        self.sigma = float(sigma)
        self.t_eps = t_eps
        self.history_offset = history_offset

    def mean_for(self, cond: Condition, shape: tuple) -> np.ndarray:
        if self.history_offset is not None and cond.history:
            return np.asarray(cond.history[-1], dtype=np.float64).reshape(shape) + self.history_offset
        if cond.id == NULL_ID:
            mu = self.null_mean if self.null_mean is not None else np.zeros(shape)
        else:
            try:
                mu = self.means[cond.id]
            except KeyError:
                raise KeyError(f"no analytic mean for condition {cond.id!r}") from None
        if cond.frame is not None and mu.shape != tuple(shape):
            mu = mu[cond.frame : cond.frame + 1]
        return np.broadcast_to(mu, shape)

    def velocity(self, x, t, cond, stage=None):
        x = np.asarray(x, dtype=np.float64)
        mu = self.mean_for(cond, x.shape)
        if self.sigma == 0.0:
            return (mu - x) / max(1.0 - t, self.t_eps)
        s2 = (1.0 - t) ** 2 + (t * self.sigma) ** 2
        a = (t * self.sigma**2 - (1.0 - t)) / s2
        return mu + a * (x - t * mu)

    def solution(self, x_start, mu, t_start: float, t: float) -> np.ndarray:
        """Closed-form ODE state at t starting from ``x_start`` at ``t_start``."""
        scale = self._spread(t) / self._spread(t_start)
        return t * mu + scale * (np.asarray(x_start) - t_start * mu)

    def _spread(self, t):
        return math.sqrt((1.0 - t) ** 2 + (t * self.sigma) ** 2)


def guided_velocity(model, x, t: float, cond: Condition, scale: float, stage: int | None = None) -> np.ndarray:
    """Classifier-free guidance: ``v_null + scale * (v_cond - v_null)``.

    ``scale == 1`` evaluates the conditional branch only, so it costs one call.
    """
    if scale < 0:
        raise ValueError("guidance scale must be >= 0")
    v_cond = model.velocity(x, t, cond, stage=stage)
    if scale == 1.0:
        v = v_cond
    else:
        v_null = model.velocity(x, t, cond.null(), stage=stage)
        v = v_null + scale * (v_cond - v_null)
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"guided velocity is non-finite at t={t}")
    return v


def sample_ode(model, x0, cond: Condition, grid: TimeGrid, scale: float = 1.0, stage=None,
               callback: Callable | None = None) -> np.ndarray:
    """Explicit Euler from ``grid.times[grid.skip_count]`` to the last grid time."""
    x = np.array(x0, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("initial state is non-finite")
    for n, t, dt in grid.retained():
        with np.errstate(over="ignore", invalid="ignore"):
            x = x + guided_velocity(model, x, t, cond, scale, stage=stage) * dt
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("ODE state became non-finite", step=n)
        if callback is not None:
            callback(n, t + dt, x)
    return x


def flow_matching_loss(model, batch: Sequence[tuple], times: Sequence[float]) -> float:
    """Per-entry mean squared error between predicted and target velocity, averaged over the batch."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if len(times) != len(batch):
        raise ValueError("need one time per batch item")
    per_item = []
    for (x0, x1, cond), t in zip(batch, times):
        xt = interpolate_path(x0, x1, t)
        v = np.asarray(model.velocity(xt, t, cond), dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("model output is non-finite")
        per_item.append(float(np.mean((target_velocity(x0, x1) - v) ** 2)))
    return math.fsum(per_item) / len(per_item)


# --------------------------------------------------------------------------- MLP


class MLPVelocity:
    """Two-hidden-layer tanh MLP over (flattened latent, t, label embedding, history summary).

    Label embeddings are a learned table; row 0 is the null condition.
    """

    PARAM_ORDER = ("emb", "W1", "b1", "W2", "b2", "W3", "b3")

    def __init__(self, latent_shape, labels: Sequence[str], hidden: int = 64, emb_dim: int = 8,
                 history_dim: int = 0, seed: int = 0):
        self.latent_shape = tuple(int(s) for s in latent_shape)
        self.labels = [NULL_ID] + [l for l in labels if l != NULL_ID]
        self.hidden = int(hidden)
        self.emb_dim = int(emb_dim)
        self.history_dim = int(history_dim)
        self.seed = int(seed)
        self.index = {l: i for i, l in enumerate(self.labels)}
        D = self.latent_dim
        d_in = D + 1 + self.emb_dim + self.history_dim
        rng = make_rng(seed, 7)
        h = self.hidden
        self.params = {
            "emb": rng.standard_normal((len(self.labels), self.emb_dim)) * 0.5,
            "W1": rng.standard_normal((d_in, h)) / math.sqrt(d_in),
            "b1": np.zeros(h),
            "W2": rng.standard_normal((h, h)) / math.sqrt(h),
            "b2": np.zeros(h),
            "W3": rng.standard_normal((h, D)) * (0.1 / math.sqrt(h)),
            "b3": np.zeros(D),
        }

    @property
    def latent_dim(self) -> int:
        return int(np.prod(self.latent_shape))

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.PARAM_ORDER])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError("parameter vector has the wrong length")
        i = 0
        for k in self.PARAM_ORDER:
            p = self.params[k]
            self.params[k] = flat[i : i + p.size].reshape(p.shape).copy()
            i += p.size

    def config(self) -> dict:
        return {
            "latent_shape": list(self.latent_shape),
            "labels": self.labels[1:],
            "hidden": self.hidden,
            "emb_dim": self.emb_dim,
            "history_dim": self.history_dim,
            "seed": self.seed,
        }

    def label_index(self, cond: Condition) -> int:
        try:
            return self.index[cond.id]
        except KeyError:
            raise KeyError(f"model has no embedding for condition {cond.id!r}") from None

    def _history_vector(self, cond: Condition) -> np.ndarray:
        if self.history_dim == 0:
            return np.zeros(0)
        if not cond.history:
            return np.zeros(self.history_dim)
        h = np.concatenate([np.ravel(np.asarray(e, dtype=np.float64)) for e in cond.history])
        if h.size != self.history_dim:
            raise ValueError(f"history summary has {h.size} entries, model expects {self.history_dim}")
        return h

    def _inputs(self, X, t, idx, H):
        E = self.params["emb"][idx]
        return np.concatenate([X, t[:, None], E, H], axis=1)

    def forward(self, X, t, idx, H):
        p = self.params
        inp = self._inputs(X, t, idx, H)
        a1 = np.tanh(inp @ p["W1"] + p["b1"])
        a2 = np.tanh(a1 @ p["W2"] + p["b2"])
        return a2 @ p["W3"] + p["b3"], (inp, a1, a2)

    def velocity(self, x, t, cond, stage=None):
        x = np.asarray(x, dtype=np.float64)
        if x.size != self.latent_dim:
            raise ValueError(f"model expects {self.latent_shape}, got {x.shape}")
        H = self._history_vector(cond)[None, :]
        if cond.embedding is not None:
            inp = np.concatenate([x.reshape(1, -1), [[t]], np.asarray(cond.embedding).reshape(1, -1), H], axis=1)
            p = self.params
            a2 = np.tanh(np.tanh(inp @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"])
            out = a2 @ p["W3"] + p["b3"]
        else:
            out, _ = self.forward(x.reshape(1, -1), np.array([t], dtype=np.float64),
                                  np.array([self.label_index(cond)]), H)
        return out.reshape(x.shape)

    def loss_and_grad(self, X, t, idx, H, target):
        """Per-entry MSE over a flattened batch and its gradient dict."""
        p = self.params
        out, (inp, a1, a2) = self.forward(X, t, idx, H)
        diff = out - target
        n = diff.size
        loss = float(np.sum(diff * diff) / n)
        d_out = 2.0 * diff / n
        g = {"W3": a2.T @ d_out, "b3": d_out.sum(0)}
        dz2 = (d_out @ p["W3"].T) * (1.0 - a2 * a2)
        g["W2"] = a1.T @ dz2
        g["b2"] = dz2.sum(0)
        dz1 = (dz2 @ p["W2"].T) * (1.0 - a1 * a1)
        g["W1"] = inp.T @ dz1
        g["b1"] = dz1.sum(0)
        D = self.latent_dim
        d_emb = (dz1 @ p["W1"].T)[:, D + 1 : D + 1 + self.emb_dim]
        g_emb = np.zeros_like(p["emb"])
        np.add.at(g_emb, idx, d_emb)
        g["emb"] = g_emb
        return loss, g

    def flat_grad(self, grads: dict) -> np.ndarray:
        return np.concatenate([grads[k].ravel() for k in self.PARAM_ORDER])


@dataclass
class CouplingSampler:
    """Draws (x0 ~ N(0, I), x1 = target(label), label) triples for conditional flow matching."""

    means: dict
    target_std: float = 0.0

    def labels(self) -> list[str]:
        return sorted(self.means)

    def sample(self, rng: np.random.Generator, n: int):
        labels = self.labels()
        first = np.asarray(self.means[labels[0]], dtype=np.float64)
        D = first.size
        picks = rng.integers(0, len(labels), size=n)
        mu = np.stack([np.ravel(self.means[labels[i]]) for i in picks])
        x0 = rng.standard_normal((n, D))
        x1 = mu + self.target_std * rng.standard_normal((n, D)) if self.target_std else mu
        return x0, x1, [labels[i] for i in picks]


@dataclass
class TrainConfig:
    hidden: int = 64
    emb_dim: int = 8
    lr: float = 3e-3
    steps: int = 3000
    batch_size: int = 256
    p_uncond: float = 0.1
    seed: int = 0
    loss_threshold: float = 0.5
    eval_size: int = 2048
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


def _fm_batch(model: MLPVelocity, sampler: CouplingSampler, rng, n: int, p_uncond: float):
    x0, x1, labels = sampler.sample(rng, n)
    t = rng.random(n)
    drop = rng.random(n) < p_uncond
    idx = np.array([0 if d else model.index[l] for l, d in zip(labels, drop)])
    X = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    H = np.zeros((n, model.history_dim))
    return X, t, idx, H, x1 - x0


def train_toy_model(sampler: CouplingSampler, config: TrainConfig | None = None, latent_shape=None) -> MLPVelocity:
    """Fit an MLP velocity by flow matching with Adam; deterministic given ``config.seed``.

    The null label is trained by dropping the condition with probability ``p_uncond``
    so the model supports classifier-free guidance. ``model.loss_history`` holds the
    per-step training loss; ``model.initial_loss``/``model.final_loss`` are measured
    on a fixed held-out batch.
    """
    cfg = config or TrainConfig()
    labels = sampler.labels()
    if latent_shape is None:
        latent_shape = np.asarray(sampler.means[labels[0]]).shape
    model = MLPVelocity(latent_shape, labels, hidden=cfg.hidden, emb_dim=cfg.emb_dim, seed=cfg.seed)
    eval_batch = _fm_batch(model, sampler, make_rng(cfg.seed, 2), cfg.eval_size, cfg.p_uncond)
    model.initial_loss = model.loss_and_grad(*eval_batch)[0]
    rng = make_rng(cfg.seed, 1)
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(v) for k, v in model.params.items()}
    history = []
    for step in range(1, cfg.steps + 1):
        loss, g = model.loss_and_grad(*_fm_batch(model, sampler, rng, cfg.batch_size, cfg.p_uncond))
        if not math.isfinite(loss):
            raise NonFiniteError("training loss is non-finite", step=step)
        history.append(loss)
        c1 = 1.0 - cfg.beta1**step
        c2 = 1.0 - cfg.beta2**step
        for k in model.PARAM_ORDER:
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k]
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] ** 2
            model.params[k] = model.params[k] - cfg.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + cfg.adam_eps)
    model.loss_history = history
    model.final_loss = model.loss_and_grad(*eval_batch)[0]
    model.train_config = asdict(cfg)
    if model.final_loss > cfg.loss_threshold:
        raise NonConvergenceError(model.final_loss, cfg.loss_threshold)
    return model


def save_checkpoint(model: MLPVelocity, path) -> None:
    cfg = model.config()
    doc = {
        "format": "fivelab-mlp",
        "version": CHECKPOINT_VERSION,
        "config": cfg,
        "config_hash": sha256_of(cfg),
        "seed": model.seed,
        "train_config": getattr(model, "train_config", None),
        "params": {k: encode_array(model.params[k]) for k in model.PARAM_ORDER},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path) -> MLPVelocity:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "fivelab-mlp" or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint {doc.get('format')!r} v{doc.get('version')!r}")
    cfg = doc["config"]
    if sha256_of(cfg) != doc["config_hash"]:
        raise ValueError("checkpoint config hash mismatch")
    model = MLPVelocity(cfg["latent_shape"], cfg["labels"], hidden=cfg["hidden"], emb_dim=cfg["emb_dim"],
                        history_dim=cfg["history_dim"], seed=cfg["seed"])
    for k in model.PARAM_ORDER:
        arr = decode_array(doc["params"][k])
        if arr.shape != model.params[k].shape:
            raise ValueError(f"checkpoint parameter {k} has shape {arr.shape}")
        model.params[k] = arr
    return model
