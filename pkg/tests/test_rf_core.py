import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fivelab.rf_core import (
    NULL_ID,
    AnalyticPointMassField,
    CallCounter,
    Condition,
    CouplingSampler,
    MLPVelocity,
    NonConvergenceError,
    NonFiniteError,
    TimeGrid,
    TrainConfig,
    flow_matching_loss,
    guided_velocity,
    interpolate_path,
    load_checkpoint,
    make_rng,
    sample_ode,
    save_checkpoint,
    target_velocity,
    train_toy_model,
)

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def lat(*vals):
    return np.array(vals, dtype=float).reshape(1, 1, 1, -1)


class ConstField:
    def __init__(self, cond_val, null_val):
        self.cond_val, self.null_val = cond_val, null_val

    def velocity(self, x, t, cond, stage=None):
        return np.full_like(np.asarray(x, dtype=float), self.null_val if cond.id == NULL_ID else self.cond_val)


class PerfectModel:
    """Returns x1 - x0 for a known coupling (it sees x_t and t, and knows x0 and x1 per label)."""

    def __init__(self, pairs):
        self.pairs = pairs

    def velocity(self, x, t, cond, stage=None):
        x0, x1 = self.pairs[cond.id]
        return x1 - x0


# ---- interpolation and target velocity ----

def test_interpolate_endpoints_and_value():
    x0, x1 = np.zeros((1, 1, 2, 2)), np.full((1, 1, 2, 2), 2.0)
    assert np.array_equal(interpolate_path(x0, x1, 0.0), x0)
    assert np.array_equal(interpolate_path(x0, x1, 1.0), x1)
    assert np.allclose(interpolate_path(x0, x1, 0.25), 0.5)


def test_interpolate_errors():
    with pytest.raises(ValueError):
        interpolate_path(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)), 0.5)
    with pytest.raises(ValueError):
        interpolate_path(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)), 1.5)


def test_target_velocity_values():
    a = np.ones((1, 1, 2, 2))
    assert np.array_equal(target_velocity(a, a), np.zeros_like(a))
    assert np.allclose(target_velocity(a, 3 * a), 2.0)
    with pytest.raises(ValueError):
        target_velocity(a, np.ones((1, 1, 1, 2)))


@given(arrays(float, (1, 1, 2, 3), elements=finite), arrays(float, (1, 1, 2, 3), elements=finite),
       st.floats(0, 1), st.floats(0, 1))
def test_interpolate_affine(x0, x1, a, b):
    mid = interpolate_path(x0, x1, (a + b) / 2)
    avg = (interpolate_path(x0, x1, a) + interpolate_path(x0, x1, b)) / 2
    assert np.allclose(mid, avg, rtol=1e-6, atol=1e-9)


@given(arrays(float, (1, 1, 2, 2), elements=finite), arrays(float, (1, 1, 2, 2), elements=finite))
def test_target_velocity_antisymmetric(a, b):
    assert np.array_equal(target_velocity(a, b), -target_velocity(b, a))


# ---- loss ----

def test_loss_zero_for_perfect_predictor():
    rng = make_rng(0)
    x0, x1 = rng.standard_normal((1, 1, 2, 2)), rng.standard_normal((1, 1, 2, 2))
    model = PerfectModel({"c": (x0, x1)})
    assert flow_matching_loss(model, [(x0, x1, Condition("c"))], [0.3]) == 0.0


def test_loss_per_entry_mean():
    x0, x1 = np.zeros((1, 1, 3, 3)), np.ones((1, 1, 3, 3))
    zero = ConstField(0.0, 0.0)
    assert flow_matching_loss(zero, [(x0, x1, Condition("c"))], [0.5]) == pytest.approx(1.0)


def test_loss_order_invariant_and_errors():
    rng = make_rng(3)
    batch = [(rng.standard_normal((1, 1, 2, 2)), rng.standard_normal((1, 1, 2, 2)), Condition("c")) for _ in range(7)]
    times = list(rng.random(7))
    model = ConstField(0.3, 0.0)
    perm = [3, 0, 6, 1, 5, 2, 4]
    a = flow_matching_loss(model, batch, times)
    b = flow_matching_loss(model, [batch[i] for i in perm], [times[i] for i in perm])
    assert a == b
    with pytest.raises(ValueError):
        flow_matching_loss(model, [], [])


def test_loss_nonfinite_model():
    bad = ConstField(float("nan"), 0.0)
    with pytest.raises(NonFiniteError):
        flow_matching_loss(bad, [(np.zeros((1, 1, 1, 1)), np.ones((1, 1, 1, 1)), Condition("c"))], [0.5])


# ---- guidance ----

def test_guided_velocity_values():
    f = ConstField(2.0, 1.0)
    x = np.zeros((1, 1, 2, 2))
    c = Condition("c")
    assert np.allclose(guided_velocity(f, x, 0.5, c, 0.0), 1.0)
    assert np.allclose(guided_velocity(f, x, 0.5, c, 1.0), 2.0)
    assert np.allclose(guided_velocity(f, x, 0.5, c, 5.0), 6.0)
    with pytest.raises(ValueError):
        guided_velocity(f, x, 0.5, c, -1.0)
    with pytest.raises(NonFiniteError):
        guided_velocity(ConstField(np.inf, 0.0), x, 0.5, c, 1.0)


def test_guidance_scale_one_is_single_call():
    f = CallCounter(ConstField(2.0, 1.0))
    guided_velocity(f, np.zeros((1, 1, 1, 1)), 0.1, Condition("c"), 1.0)
    assert f.calls == 1
    guided_velocity(f, np.zeros((1, 1, 1, 1)), 0.1, Condition("c"), 3.0)
    assert f.calls == 3


# ---- time grid and sampler ----

def test_time_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0, 0.5, 0.4, 1.0]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([-0.1, 1.0]))
    with pytest.raises(ValueError):
        TimeGrid.uniform(4, 5)
    g = TimeGrid.uniform(4, 1)
    assert [n for n, _, _ in g.retained()] == [1, 2, 3]


def test_sample_ode_zero_field_is_identity():
    x0 = make_rng(1).standard_normal((1, 1, 2, 2))
    assert np.array_equal(sample_ode(ConstField(0.0, 0.0), x0, Condition("c"), TimeGrid.uniform(10)), x0)


def test_sample_ode_point_mass_reaches_mean():
    mu = lat(2.0, -1.0)
    field = AnalyticPointMassField({"c": mu})
    # a 10,000-step run is the fine-grained oracle
    oracle = sample_ode(field, lat(0.0, 0.0), Condition("c"), TimeGrid.uniform(10_000))
    assert np.allclose(oracle, mu, atol=1e-9)
    for n in (10, 50, 200):
        out = sample_ode(field, lat(0.0, 0.0), Condition("c"), TimeGrid.uniform(n))
        assert np.abs(out - oracle).max() < 1e-9


def test_sample_ode_point_mass_euler_exact_along_path():
    # the solution x(t) = (1-t) x0 + t mu is affine in t, so every Euler step is exact
    mu = lat(2.0, -1.0)
    x0 = lat(0.5, 0.25)
    field = AnalyticPointMassField({"c": mu})
    seen = []
    sample_ode(field, x0, Condition("c"), TimeGrid.uniform(7), callback=lambda n, t, x: seen.append((t, x.copy())))
    for t, x in seen:
        assert np.allclose(x, (1 - t) * x0 + t * mu, atol=1e-12)


def test_sample_ode_first_order_on_curved_field():
    mu = lat(2.0, -1.0)
    field = AnalyticPointMassField({"c": mu}, sigma=0.5)
    x0 = lat(0.3, 0.7)
    exact = field.solution(x0, mu, 0.0, 1.0)
    ns = [25, 50, 100, 200, 400]
    errs = [np.abs(sample_ode(field, x0, Condition("c"), TimeGrid.uniform(n)) - exact).max() for n in ns]
    slope = np.polyfit(np.log(1.0 / np.array(ns)), np.log(errs), 1)[0]
    assert 0.8 <= slope <= 1.2


def test_sample_ode_reports_step():
    class Blowup:
        def velocity(self, x, t, cond, stage=None):
            return np.full_like(x, 1e308) if t > 0.45 else np.zeros_like(x)

    with pytest.raises(NonFiniteError) as exc:
        sample_ode(Blowup(), np.full((1, 1, 1, 1), 1.75e308), Condition("c"), TimeGrid.uniform(10))
    assert exc.value.step == 5


def test_analytic_field_frame_selection_and_history():
    means = np.arange(3.0).reshape(3, 1, 1, 1)
    f = AnalyticPointMassField({"c": means})
    x = np.zeros((1, 1, 1, 1))
    assert f.velocity(x, 0.0, Condition("c", frame=2), None).item() == 2.0
    h = AnalyticPointMassField({}, history_offset=0.5)
    c = Condition("c").with_history([np.full((1, 1, 1, 1), 1.0)])
    assert h.velocity(x, 0.0, c).item() == 1.5


# ---- MLP ----

def _tiny():
    m = MLPVelocity((1,), ["a"], hidden=1, emb_dim=1, seed=4)
    for k in m.params:
        m.params[k] = make_rng(9, len(k)).standard_normal(m.params[k].shape)
    return m


def test_gradient_check_ten_parameters():
    m = _tiny()
    assert m.n_params == 10
    rng = make_rng(5)
    n = 6
    X, t = rng.standard_normal((n, 1)), rng.random(n)
    idx = rng.integers(0, 2, n)
    H = np.zeros((n, 0))
    target = rng.standard_normal((n, 1))
    _, g = m.loss_and_grad(X, t, idx, H, target)
    analytic = m.flat_grad(g)
    base = m.get_flat()
    eps = 1e-6
    for i in range(base.size):
        p, q = base.copy(), base.copy()
        p[i] += eps
        q[i] -= eps
        m.set_flat(p)
        lp = m.loss_and_grad(X, t, idx, H, target)[0]
        m.set_flat(q)
        lq = m.loss_and_grad(X, t, idx, H, target)[0]
        fd = (lp - lq) / (2 * eps)
        assert abs(fd - analytic[i]) <= 1e-4 * max(abs(fd), abs(analytic[i]), 1e-3)
    m.set_flat(base)


def test_mlp_loss_matches_flow_matching_loss():
    m = _tiny()
    rng = make_rng(6)
    x0, x1 = rng.standard_normal((1,)), rng.standard_normal((1,))
    t = 0.37
    a = flow_matching_loss(m, [(x0, x1, Condition("a"))], [t])
    b = m.loss_and_grad(((1 - t) * x0 + t * x1)[None], np.array([t]), np.array([1]), np.zeros((1, 0)),
                        (x1 - x0)[None])[0]
    assert a == pytest.approx(b, rel=1e-12)


def test_mlp_unknown_label_and_shape():
    m = _tiny()
    with pytest.raises(KeyError):
        m.velocity(np.zeros(1), 0.5, Condition("zzz"))
    with pytest.raises(ValueError):
        m.velocity(np.zeros(3), 0.5, Condition("a"))


@pytest.fixture(scope="module")
def trained():
    means = {"cat": np.array([2.0, -1.0]), "dog": np.array([-1.5, 1.0])}
    cfg = TrainConfig(steps=3000, seed=0)
    return means, cfg, train_toy_model(CouplingSampler(means), cfg)


def test_training_reduces_loss(trained):
    _, cfg, model = trained
    assert model.final_loss < model.initial_loss
    assert model.final_loss < cfg.loss_threshold


def test_trained_model_approximates_point_mass_field(trained):
    means, _, model = trained
    rng = make_rng(123)
    errs, refs = [], []
    for label, mu in means.items():
        for _ in range(200):
            t = rng.uniform(0.0, 0.8)
            x = (1 - t) * rng.standard_normal(2) + t * mu
            exact = (mu - x) / (1 - t)
            errs.append(model.velocity(x, t, Condition(label)) - exact)
            refs.append(exact)
    rel = math.sqrt(np.mean(np.square(errs)) / np.mean(np.square(refs)))
    assert rel < 0.1


def test_training_deterministic():
    means = {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])}
    cfg = TrainConfig(steps=60, seed=3, loss_threshold=10.0, hidden=8)
    m1 = train_toy_model(CouplingSampler(means), cfg)
    m2 = train_toy_model(CouplingSampler(means), cfg)
    assert np.array_equal(m1.get_flat(), m2.get_flat())


def test_training_nonconvergence_reports_loss():
    cfg = TrainConfig(steps=2, seed=0, loss_threshold=1e-6, hidden=4)
    with pytest.raises(NonConvergenceError) as exc:
        train_toy_model(CouplingSampler({"a": np.array([3.0])}), cfg)
    assert exc.value.final_loss > 1e-6


def test_checkpoint_round_trip(tmp_path, trained):
    _, _, model = trained
    p = tmp_path / "m.json"
    save_checkpoint(model, p)
    back = load_checkpoint(p)
    assert np.array_equal(back.get_flat(), model.get_flat())
    x = np.array([0.2, 0.1])
    assert np.array_equal(back.velocity(x, 0.3, Condition("cat")), model.velocity(x, 0.3, Condition("cat")))


def test_checkpoint_rejects_tampered_config(tmp_path, trained):
    import json

    _, _, model = trained
    p = tmp_path / "m.json"
    save_checkpoint(model, p)
    doc = json.loads(p.read_text())
    doc["config"]["hidden"] = 3
    p.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        load_checkpoint(p)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rng_streams_deterministic(seed):
    assert np.array_equal(make_rng(seed, 1).standard_normal(3), make_rng(seed, 1).standard_normal(3))
