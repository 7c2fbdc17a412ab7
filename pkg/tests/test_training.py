import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fatnn import autodiff as ad
from fatnn.model import ModelConfig, init_model
from fatnn.problems import heat6d, sample_boundary, sample_initial, wave6d
from fatnn.training import (
    AdamState,
    AdaptiveConfig,
    Batches,
    GateState,
    RunHistory,
    TrainingDiverged,
    TrainOptions,
    adam_step,
    adaptive_solve,
    assemble_loss,
    boundary_residual,
    draw_batches,
    field_derivs,
    gate_weight,
    initial_time_derivative_residual,
    loss_and_grad,
    lr_at,
    pointwise_error_grid,
    relative_l2,
    train,
    update_mu,
)
from helpers import exact_sine_model, sine_problem

# -- schedule, gate ------------------------------------------------------------


def test_lr_schedule():
    assert lr_at(0) == 0.001
    assert lr_at(999) == 0.001
    assert lr_at(1000) == pytest.approx(0.00095, rel=1e-15)
    assert lr_at(2500) == pytest.approx(0.0009025, rel=1e-15)
    with pytest.raises(ValueError):
        lr_at(-1)


def test_gate_values():
    assert gate_weight(0.3, GateState(mu=0.3)) == 0.5
    assert gate_weight(50.0, GateState()) == pytest.approx(0.0, abs=1e-15)
    assert gate_weight(0.0, GateState(mu=0.2)) == pytest.approx(0.880797, abs=5e-7)


def test_mu_updates():
    assert update_mu(GateState(), 0.0).mu == pytest.approx(0.002)
    assert update_mu(GateState(), 1e6).mu == pytest.approx(0.0, abs=1e-300)
    assert update_mu(GateState(mu=0.5), 100.0).mu == pytest.approx(0.5012131, abs=5e-8)
    with pytest.raises(ValueError):
        update_mu(GateState(), -1.0)


@given(st.floats(-2, 2), st.floats(-2, 2))
def test_gate_monotone_in_time(t, dt):
    g = GateState(mu=0.4)
    lo, hi = sorted((t, t + abs(dt)))
    assert gate_weight(hi, g) <= gate_weight(lo, g) + 1e-15


# -- Adam ----------------------------------------------------------------------


def test_adam_zero_gradient():
    p = np.array([1.0, -2.0])
    adam_step(AdamState.zeros(2), p, np.zeros(2), 0.1)
    np.testing.assert_array_equal(p, [1.0, -2.0])


@given(st.floats(1e-3, 1e3), st.sampled_from([-1.0, 1.0]), st.floats(1e-5, 1e-1))
def test_adam_unit_step(mag, sign, lr):
    g = np.array([sign * mag])
    p = np.zeros(1)
    state = AdamState.zeros(1)
    for _ in range(50):
        before = p.copy()
        adam_step(state, p, g, lr)
        step = abs(float(p[0] - before[0]))
        assert step == pytest.approx(lr, rel=1e-5)
    assert np.sign(p[0]) == -sign


def test_adam_rejects_nonfinite_before_mutating():
    p = np.ones(2)
    state = AdamState.zeros(2)
    with pytest.raises(ad.NonFiniteError):
        adam_step(state, p, np.array([1.0, np.nan]), 0.1)
    assert state.step == 0 and np.all(p == 1.0) and np.all(state.m == 0.0)


def test_adam_length_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(3), np.ones(2), np.ones(2), 0.1)


# -- ansatz and residuals ------------------------------------------------------


def test_time_ansatz_initial_condition(rng):
    p = heat6d(ks=(2, 2, 2, 4, 4, 4))
    model = init_model(ModelConfig("cp", 7, 3, hidden=(4,), m=2, sigma=1.0), 0)
    pts = sample_initial(p, 10, 0)
    u = np.asarray(ad.value_of(field_derivs(p, model, pts, want=0).u))
    np.testing.assert_allclose(u, p.exact_value(pts), atol=1e-14)


def test_time_ansatz_derivatives_vs_finite_differences(rng):
    p = wave6d(d=2, k1=2, k2=4)
    model = init_model(ModelConfig("cp", 3, 3, hidden=(4,), m=2, sigma=1.0), 2)
    pts = rng.uniform(0.1, 0.9, size=(5, 3))
    fd = field_derivs(p, model, pts, want=2)
    u = lambda q: np.asarray(ad.value_of(field_derivs(p, model, q, want=0).u))
    e = np.array([0.0, 0.0, 1.0])
    c1 = lambda h: (u(pts + h * e) - u(pts - h * e)) / (2 * h)
    c2 = lambda h: (u(pts + h * e) - 2 * u(pts) + u(pts - h * e)) / h**2
    np.testing.assert_allclose(fd.ut, (4 * c1(5e-5) - c1(1e-4)) / 3, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(fd.utt, (4 * c2(5e-4) - c2(1e-3)) / 3, rtol=1e-5, atol=1e-6)


def test_initial_velocity_residual_zero_network():
    p = wave6d(d=2, k1=2, k2=4)
    model = init_model(ModelConfig("cp", 3, 2, hidden=(3,), m=2, sigma=1.0), 0)
    model.flat[:] = 0.0
    pts = sample_initial(p, 8, 0)
    np.testing.assert_array_equal(initial_time_derivative_residual(p, model, pts), 0.0)


def test_initial_velocity_residual_constant_network():
    p = wave6d(d=2, k1=2, k2=4)
    model = init_model(ModelConfig("cp", 3, 1, hidden=(), feature_mode="none"), 0)
    arrays = model.arrays()
    for i in range(3):
        arrays[2 * i][...] = 0.0
        arrays[2 * i + 1][...] = 1.0
    arrays[-1][...] = 0.75  # N(x, t) = 0.75 everywhere
    pts = sample_initial(p, 8, 0)
    np.testing.assert_allclose(initial_time_derivative_residual(p, model, pts), 0.75)


def test_initial_velocity_needs_t0():
    p = wave6d(d=2, k1=2, k2=4)
    model = init_model(ModelConfig("cp", 3, 1, hidden=(2,), m=1, sigma=1.0), 0)
    with pytest.raises(ValueError):
        initial_time_derivative_residual(p, model, np.array([[0.5, 0.5, 0.1]]))
    with pytest.raises(ValueError):
        initial_time_derivative_residual(heat6d(), model, np.zeros((1, 7)))


def test_boundary_residual_cases():
    p = sine_problem(2)
    pts = sample_boundary(p, 20, 0)
    np.testing.assert_allclose(boundary_residual(p, exact_sine_model(2), pts), 0.0, atol=1e-14)
    np.testing.assert_allclose(boundary_residual(p, lambda q: np.ones(len(q)), pts), 1.0, atol=1e-14)
    with pytest.raises(ValueError):
        boundary_residual(p, exact_sine_model(2), np.array([[0.5, 0.5]]))


def test_wave_1d_boundary_residual_is_t_times_network(rng):
    p = wave6d(d=1, k1=2, k2=4)
    model = init_model(ModelConfig("cp", 2, 2, hidden=(3,), m=2, sigma=1.0), 0)
    pts = np.column_stack([rng.integers(0, 2, size=6).astype(float), rng.uniform(0, 1, size=6)])
    expected = pts[:, 1] * model(pts)
    np.testing.assert_allclose(boundary_residual(p, model, pts), expected, atol=1e-12)


# -- loss ----------------------------------------------------------------------


def test_exact_model_has_zero_loss():
    p = sine_problem(2)
    batches = draw_batches(p, 0)
    loss, parts = assemble_loss(p, exact_sine_model(2), batches)
    assert float(loss) < 1e-20
    assert parts["L_b"] < 1e-24


def test_zero_boundary_weight_is_pure_residual():
    p = sine_problem(2).with_(boundary_weight=0.0)
    model = init_model(ModelConfig("cp", 2, 3, hidden=(4,), m=2, sigma=1.0), 0)
    loss, parts = assemble_loss(p, model, draw_batches(p, 0))
    assert float(loss) == parts["L_r"]
    assert parts["L_b"] > 0


def test_wave_gate_closed_leaves_boundary_terms():
    p = wave6d(d=2, k1=2, k2=4, n_interior=32, n_boundary_per_face=4, n_initial=16)
    model = init_model(ModelConfig("cp", 3, 2, hidden=(3,), m=2, sigma=1.0), 0)
    batches = draw_batches(p, 0)
    loss, parts = assemble_loss(p, model, batches, GateState(mu=-100.0))
    assert parts["L_r"] < 1e-300
    assert float(loss) == pytest.approx(p.omega_u * parts["L_b"] + p.omega_ut * parts["L_ut"], rel=1e-12)


def test_loss_gradient_vs_finite_differences():
    p = sine_problem(2)
    model = init_model(ModelConfig("cp", 2, 4, hidden=(4,), activation="tanh", m=2, sigma=1.0), 3)
    batches = draw_batches(p, 1, n_interior=16, n_boundary_per_face=2)
    _, _, g = loss_and_grad(p, model, batches)
    base = model.flat.copy()

    def f(v):
        model.flat[:] = v
        return float(assemble_loss(p, model, batches)[0])

    fd = ad.richardson_differences(f, base, 1e-4)
    model.flat[:] = base
    assert ad.gradient_rel_error(g, fd) < 1e-5


def test_empty_batches_rejected():
    p = sine_problem(1)
    model = exact_sine_model(1)
    with pytest.raises(ValueError):
        assemble_loss(p, model, Batches(np.zeros((0, 1)), np.zeros((2, 1))))
    with pytest.raises(ValueError):
        assemble_loss(p, model, Batches(np.full((2, 1), 0.5), None))


def test_batches_deterministic():
    p = wave6d(d=2, k1=2, k2=4)
    a, b = draw_batches(p, [3, 0, 5]), draw_batches(p, [3, 0, 5])
    assert a.interior.tobytes() == b.interior.tobytes()
    assert a.boundary.shape == (p.n_boundary_per_face * 4, 3)
    assert a.initial is not None


# -- training ------------------------------------------------------------------


def _desk_model(seed=0):
    return init_model(ModelConfig("cp", 1, 16, hidden=(16,), activation="trigblend", m=8, sigma=1.0), seed)


def test_zero_epochs_leaves_model():
    model = _desk_model()
    before = model.flat.copy()
    train(sine_problem(1), model, TrainOptions(epochs=0), 0)
    assert model.flat.tobytes() == before.tobytes()


def test_first_logged_loss_is_fresh_loss():
    p = sine_problem(1)
    model = _desk_model()
    fresh = float(assemble_loss(p, model, draw_batches(p, [0, 0, 0]))[0])
    _, hist = train(p, model, TrainOptions(epochs=3, log_every=1), 0)
    assert hist.epochs[0]["loss"] == fresh
    assert [r["epoch"] for r in hist.epochs] == [0, 1, 2]


def test_training_deterministic():
    p = sine_problem(1)
    a, b = _desk_model(), _desk_model()
    train(p, a, TrainOptions(epochs=20), 5)
    train(p, b, TrainOptions(epochs=20), 5)
    assert a.flat.tobytes() == b.flat.tobytes()


def test_desk_poisson_1d_converges():
    p = sine_problem(1, n_interior=128, n_boundary_per_face=1)
    model = _desk_model()
    train(p, model, TrainOptions(epochs=2000, log_every=500), 0)
    assert relative_l2(model, p, 4096, 1) < 1e-2


def test_divergence_restores_last_good():
    p = sine_problem(1)
    model = _desk_model()
    model.flat[0] = np.inf
    with pytest.raises(TrainingDiverged) as info:
        train(p, model, TrainOptions(epochs=2), 0)
    assert info.value.epoch == 0


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        train(sine_problem(2), _desk_model(), TrainOptions(epochs=1), 0)


def test_wave_training_advances_mu():
    p = wave6d(d=1, k1=2, k2=4, n_interior=16, n_boundary_per_face=2, n_initial=8)
    model = init_model(ModelConfig("cp", 2, 2, hidden=(3,), m=2, sigma=1.0), 0)
    _, hist = train(p, model, TrainOptions(epochs=5, log_every=1), 0)
    mus = [r["mu"] for r in hist.epochs]
    assert mus[0] == 0.0 and all(b > a for a, b in zip(mus, mus[1:]))


def test_history_round_trip(tmp_path):
    h = RunHistory(epochs=[{"epoch": 0, "loss": 1.5}], steps=[{"It": 0, "rel_l2": 0.1}], meta={"seed": 1})
    back = RunHistory.read(h.write(tmp_path / "h.jsonl"))
    assert back == h


# -- metrics -------------------------------------------------------------------


def test_relative_l2_scaling():
    p = sine_problem(2)
    exact = p.exact_value
    assert relative_l2(exact, p, 4096) == 0.0
    assert relative_l2(lambda q: 2 * exact(q), p, 4096) == pytest.approx(1.0, rel=1e-12)
    assert relative_l2(lambda q: np.zeros(len(q)), p, 4096) == 1.0
    assert relative_l2(exact_sine_model(2), p, 4096) < 1e-14


def test_relative_l2_chunking_invariant():
    p = sine_problem(2)
    m = init_model(ModelConfig("cp", 2, 2, hidden=(3,), m=2, sigma=1.0), 0)
    assert relative_l2(m, p, 1000, 3, chunk=64) == pytest.approx(relative_l2(m, p, 1000, 3, chunk=1000), rel=1e-12)


def test_error_grid():
    p = sine_problem(2)
    assert np.all(pointwise_error_grid(exact_sine_model(2), p, 4) < 1e-15)
    m = init_model(ModelConfig("cp", 2, 2, hidden=(3,), m=2, sigma=1.0), 0)
    grid = pointwise_error_grid(m, p, 4)
    assert grid.shape == (40, 40)
    from fatnn.problems import sample_interior

    pts = sample_interior(p, 1600, 4)
    np.testing.assert_allclose(grid.ravel(), np.abs(m(pts) - p.exact_value(pts)), rtol=1e-15)
    assert pointwise_error_grid(m, p, 4).tobytes() == grid.tobytes()


# -- adaptive loop -------------------------------------------------------------


def test_adaptive_zero_steps_is_plain_training():
    p = sine_problem(1)
    cfg = ModelConfig("cp", 1, 4, hidden=(4,), m=4, sigma=1.0)
    res = adaptive_solve(p, cfg, AdaptiveConfig(steps=0, top_m=2, n_dft=64, train=TrainOptions(epochs=5),
                                                n_eval=512), seed=0)
    assert len(res.steps) == 1 and res.steps[0].features is None
    model = init_model(cfg, res.history.steps[0]["seed"])
    train(p, model, TrainOptions(epochs=5), 0)
    assert model.flat.tobytes() == res.model.flat.tobytes()


def test_adaptive_writes_artifacts(tmp_path):
    p = sine_problem(2, freq=2)
    cfg = ModelConfig("cp", 2, 3, hidden=(4,), m=4, sigma=2.0)
    res = adaptive_solve(p, cfg, AdaptiveConfig(steps=1, top_m=2, n_dft=32, train=TrainOptions(epochs=3),
                                                n_eval=256), seed=1, out_dir=tmp_path, label="t")
    names = {f.relative_to(tmp_path).as_posix() for f in res.files}
    assert {"checkpoints/step0.json", "checkpoints/step1.json", "freqs_step1.json", "rel_l2.csv",
            "spectra.csv", "error_grid_step0.csv", "history.jsonl"} <= names
    header = (tmp_path / "rel_l2.csv").read_text().splitlines()[0]
    assert header.startswith("method,It=0")
    assert res.steps[1].features == res.steps[0].extraction.freqs


def test_adaptive_recovers_planted_frequencies():
    # fitting a 2-D product of pure tones; one step of training is enough for the peaks to dominate
    p = sine_problem(2, freq=3, n_interior=256, n_boundary_per_face=8)
    cfg = ModelConfig("cp", 2, 4, hidden=(16,), m=16, sigma=3.0)
    res = adaptive_solve(p, cfg, AdaptiveConfig(steps=1, top_m=1, n_dft=64, train=TrainOptions(epochs=400),
                                                n_eval=1024), seed=0)
    assert all(3 in s for s in res.steps[1].features.sets)
    assert math.isfinite(res.errors[-1])
