import ast
import inspect
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import fivelab.flowedit as fe
from fivelab.flowedit import (
    EditSession,
    flowedit_run,
    flowedit_step,
    framewise_edit_run,
    joint_edit_run,
    source_latent_at,
    target_estimate,
    velocity_delta,
    write_trajectory,
)
from fivelab.rf_core import AnalyticPointMassField, CallCounter, Condition, NonFiniteError, TimeGrid, make_rng

MU_S = np.array([0.0, 0.0]).reshape(1, 1, 1, 2)
MU_G = np.array([2.0, -1.0]).reshape(1, 1, 1, 2)


def session(x1=MU_S, field=None, steps=200, skip=0, cfg=(1.0, 1.0), seed=0, **kw):
    field = field or AnalyticPointMassField({"src": MU_S, "tgt": MU_G})
    return EditSession(field, x1, Condition("src"), Condition("tgt"), TimeGrid.uniform(steps, skip),
                       cfg[0], cfg[1], seed, **kw)


class NoisyField:
    """A non-trivial field: depends on x, t and label, with a null branch for guidance."""

    def velocity(self, x, t, cond, stage=None):
        w = {"<null>": 0.1, "a": 0.7, "b": -0.4}[cond.id]
        return np.sin(x * (1 + w)) * (1 - 0.5 * t) + w


def test_source_latent_values():
    s = session(x1=np.full((1, 1, 2, 2), 4.0))
    noise = np.zeros((1, 1, 2, 2))
    assert np.allclose(source_latent_at(s, 0.5, noise), 2.0)
    assert np.array_equal(source_latent_at(s, 1.0, noise + 7), s.x1_src)
    assert np.array_equal(source_latent_at(s, 0.0, noise + 7), noise + 7)
    with pytest.raises(ValueError):
        source_latent_at(s, 0.5, np.zeros((1, 1, 2, 3)))


def test_target_estimate_values():
    three, two, one = (np.full((1, 1, 1, 2), v) for v in (3.0, 2.0, 1.0))
    assert np.allclose(target_estimate(three, two, one), 4.0)
    assert np.array_equal(target_estimate(one, two, one), two)
    with pytest.raises(ValueError):
        target_estimate(one, two, np.ones((1, 1, 1, 3)))


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_target_estimate_round_trip(seed):
    rng = make_rng(seed)
    a, b, c = (rng.standard_normal((1, 1, 2, 2)) for _ in range(3))
    assert np.allclose(target_estimate(a, b, c) - b + c, a, atol=1e-12)


def test_identity_step_is_exact():
    s = EditSession(NoisyField(), make_rng(1).standard_normal((1, 1, 2, 2)), Condition("a"), Condition("a"),
                    TimeGrid.uniform(10), 3.0, 3.0)
    out = flowedit_step(s, s.x1_src, 0.4, 0.1, make_rng(2).standard_normal((1, 1, 2, 2)))
    assert np.array_equal(out, s.x1_src)


def test_linear_in_dt_for_constant_delta():
    class Const:
        def velocity(self, x, t, cond, stage=None):
            return np.full_like(x, 1.0 if cond.id == "b" else 0.25)

    s = EditSession(Const(), np.zeros((1, 1, 1, 2)), Condition("a"), Condition("b"), TimeGrid.uniform(10), 1.0, 1.0)
    n = np.zeros((1, 1, 1, 2))
    two = flowedit_step(s, flowedit_step(s, s.x1_src, 0.2, 0.1, n), 0.3, 0.1, n)
    one = flowedit_step(s, s.x1_src, 0.2, 0.2, n)
    assert np.allclose(two, one, atol=1e-15)


def test_point_mass_oracle_endpoint_and_trajectory():
    traj = flowedit_run(session())
    assert np.abs(traj.final - MU_G).max() < 1e-3
    for t, x in zip(traj.times, traj.states):
        assert np.abs(x - ((1 - t) * MU_S + t * MU_G)).max() < 1e-2
    mid = traj.states[traj.times.index(0.5)]
    assert np.allclose(mid, [[[[1.0, -0.5]]]], atol=1e-12)


def test_states_start_at_source():
    traj = flowedit_run(session(steps=20, skip=5))
    assert np.array_equal(traj.states[0], MU_S)
    assert traj.times[0] == pytest.approx(0.25)
    assert len(traj.states) == len(traj.times) == 16


def test_all_steps_skipped_returns_source():
    traj = flowedit_run(session(steps=10, skip=10))
    assert np.array_equal(traj.final, MU_S)


@pytest.mark.parametrize("seed", range(5))
def test_identity_run_invariance(seed):
    x1 = make_rng(seed).standard_normal((1, 2, 4, 4))
    s = EditSession(NoisyField(), x1, Condition("a"), Condition("a"), TimeGrid.uniform(50, 15), 5.0, 5.0, seed)
    assert np.abs(flowedit_run(s).final - x1).max() <= 1e-6


def test_model_call_count_is_inversion_free():
    for cfg, per in ((1.0, 1), (5.0, 2)):
        f = CallCounter(NoisyField())
        s = EditSession(f, np.zeros((1, 1, 2, 2)), Condition("a"), Condition("b"), TimeGrid.uniform(50, 15), cfg, cfg)
        flowedit_run(s)
        assert f.calls == 2 * (50 - 15) * per


def test_module_never_samples_or_inverts():
    tree = ast.parse(inspect.getsource(fe))
    names = {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)}
    assert "sample_ode" not in names


@given(st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=25, deadline=None)
def test_translation_equivariance(bx, by):
    b = np.array([bx, by]).reshape(1, 1, 1, 2)
    base = flowedit_run(session(steps=30, skip=5)).final
    shifted = flowedit_run(session(x1=MU_S + b, steps=30, skip=5,
                                   field=AnalyticPointMassField({"src": MU_S + b, "tgt": MU_G + b}))).final
    assert np.allclose(shifted - b, base, atol=1e-9)


def test_non_finite_step_index():
    class Bad:
        def velocity(self, x, t, cond, stage=None):
            return np.full_like(x, np.nan) if (t > 0.5 and cond.id == "b") else np.zeros_like(x)

    s = EditSession(Bad(), np.zeros((1, 1, 1, 1)), Condition("a"), Condition("b"), TimeGrid.uniform(10), 1.0, 1.0)
    with pytest.raises(NonFiniteError) as exc:
        flowedit_run(s)
    assert exc.value.step == 6


def test_session_validation():
    with pytest.raises(ValueError):
        session(cfg=(-1.0, 1.0))
    with pytest.raises(ValueError):
        session(n_avg=0)


def test_n_avg_averages_draws():
    s = session(steps=10, n_avg=4)
    assert np.abs(flowedit_run(s).final - MU_G).max() < 1e-9


def test_velocity_delta_zero_at_identity():
    x = make_rng(0).standard_normal((1, 1, 2, 2))
    dv, xt = velocity_delta(NoisyField(), x, x + 1, x, 0.3, Condition("a"), Condition("a"), 2.0, 2.0)
    assert np.array_equal(dv, np.zeros_like(x))
    assert np.array_equal(xt, x + 1)


# ---- joint and frame-wise ----

def test_joint_single_frame_equals_flowedit():
    a = flowedit_run(session(steps=40, skip=10, seed=3)).final
    b = joint_edit_run(session(steps=40, skip=10, seed=3)).final
    assert np.array_equal(a, b)


def test_joint_identity_four_frames():
    x1 = make_rng(7).standard_normal((4, 2, 4, 4))
    s = EditSession(NoisyField(), x1, Condition("b"), Condition("b"), TimeGrid.uniform(50, 15), 5.0, 5.0, 11)
    assert np.abs(joint_edit_run(s).final - x1).max() <= 1e-6


def test_joint_per_frame_targets():
    src = np.zeros((3, 1, 1, 2))
    tgt = np.arange(6.0).reshape(3, 1, 1, 2)
    field = AnalyticPointMassField({"src": src, "tgt": tgt})
    s = EditSession(field, src, Condition("src"), Condition("tgt"), TimeGrid.uniform(100, 20), 1.0, 1.0)
    assert np.abs(joint_edit_run(s).final - tgt).max() < 1e-3


def test_joint_rejects_frame_conditions():
    s = session()
    s.c_src = Condition("src", frame=0)
    with pytest.raises(ValueError):
        joint_edit_run(s)


def test_framewise_per_frame_targets():
    src = np.zeros((3, 1, 1, 2))
    tgt = np.arange(6.0).reshape(3, 1, 1, 2)
    field = AnalyticPointMassField({"src": src, "tgt": tgt})
    s = EditSession(field, src, Condition("src"), Condition("tgt"), TimeGrid.uniform(100, 20), 1.0, 1.0)
    out = np.concatenate([t.final for t in framewise_edit_run(s)])
    assert np.abs(out - tgt).max() < 1e-3


def test_determinism_and_trajectory_dump(tmp_path):
    s = EditSession(NoisyField(), np.ones((1, 1, 2, 2)), Condition("a"), Condition("b"), TimeGrid.uniform(12, 2),
                    2.0, 3.0, seed=5)
    a, b = flowedit_run(s), flowedit_run(s)
    assert all(np.array_equal(x, y) for x, y in zip(a.states, b.states))
    p = tmp_path / "traj.jsonl"
    write_trajectory(a, p, include_states=True)
    rows = [json.loads(l) for l in p.read_text().splitlines()]
    assert [r["step"] for r in rows] == list(range(11))
    assert rows[0]["dv_norm"] == 0.0 and rows[1]["dv_norm"] == a.dv_norms[0]
    assert "state" in rows[-1]
