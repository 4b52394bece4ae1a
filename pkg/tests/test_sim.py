"""The generating process, calibration, and the Monte Carlo driver."""

from dataclasses import replace

import numpy as np
import pytest

from aggshock.aggregate import estimate
from aggshock.errors import (
    DataError,
    DegenerateInstrument,
    DegenerateSeries,
    RankTooLarge,
)
from aggshock.inference import ar_test, estimate_variance
from aggshock.panel import AggregateData, ExposureVector, default_t0
from aggshock.sim import (
    DgpSpec,
    apply_design,
    calibrate_from_panel,
    calibration_exposures,
    design_flags,
    fit_ma2,
    run_monte_carlo,
    simulate_once,
    synthetic_spec,
    _targets,
)
from aggshock.tsls import tsls_estimate
from aggshock.tsmodel import fit_lambda_model
from aggshock.weights import WeightConfig

import oracles
from helpers import make_panel


# -- designs and the reference parameterization --------------------------------------


def test_design_flag_table():
    assert design_flags(1) == (False, False)
    assert design_flags(2) == (True, False)
    assert design_flags(3) == (False, True)
    assert design_flags(4) == (True, True)
    for bad in (0, 5, -1):
        with pytest.raises(DataError):
            design_flags(bad)
    spec = synthetic_spec(4, 9)
    d4 = apply_design(spec, 4)
    assert d4.use_L and d4.use_H and not spec.use_L and not spec.use_H


def test_synthetic_spec_is_deterministic_and_pinned():
    a = synthetic_spec(8, 12, seed=3)
    b = synthetic_spec(8, 12, seed=3)
    for name in ("pi", "theta_y", "theta_w", "beta_y", "beta_w", "mu_y", "mu_w", "L_y", "L_w"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert a.tau == 1.43
    assert a.z_ma == (1.14, 0.52)
    assert a.z_innovation_var == 0.43
    assert a.h_mix == (0.5, 0.25)
    assert np.array_equal(a.noise_cov, np.array([[0.001, 0.0], [0.0, 0.003]]))
    assert a.pi.shape == (8,) and a.L_y.shape == (8, 12)
    with pytest.raises(DataError):
        synthetic_spec(2, 12)
    with pytest.raises(DataError):
        synthetic_spec(8, 8)


def test_synthetic_spec_population_moments():
    spec = synthetic_spec(4000, 9, seed=4)
    assert spec.pi.mean() == pytest.approx(1.0, abs=0.02)
    assert spec.pi.std() == pytest.approx(0.25, abs=0.02)
    assert np.var(spec.theta_w - 0.2 * spec.pi) == pytest.approx(1.0 - 0.2**2, abs=0.08)
    assert np.var(spec.theta_y - 0.45 * spec.pi) == pytest.approx(
        1.5**2 * (1.0 - 0.3**2), abs=0.15
    )


def test_synthetic_factor_panels_have_documented_scale_and_rank():
    spec = synthetic_spec(20, 15, seed=5)
    assert np.linalg.norm(spec.L_y) == pytest.approx(np.sqrt(0.001) * 15, rel=1e-12)
    assert np.linalg.norm(spec.L_w) == pytest.approx(np.sqrt(0.003) * 15, rel=1e-12)
    assert np.linalg.matrix_rank(spec.L_y) == 11
    small = synthetic_spec(4, 9, seed=5)
    assert np.linalg.matrix_rank(small.L_y) == 3


def test_dgp_spec_validates_shapes():
    spec = synthetic_spec(4, 9)
    with pytest.raises(DataError):
        replace(spec, pi=np.ones(5))
    with pytest.raises(DataError):
        replace(spec, noise_cov=np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(DataError):
        replace(spec, noise_cov=np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(DataError):
        replace(spec, z_innovation_var=0.0)


# -- single draws -------------------------------------------------------------------


def test_simulation_is_deterministic_in_the_seed():
    spec = apply_design(synthetic_spec(5, 10, seed=1), 4)
    p1, z1, h1 = simulate_once(spec, 42)
    p2, z2, h2 = simulate_once(spec, 42)
    assert np.array_equal(p1.Y, p2.Y) and np.array_equal(p1.W, p2.W)
    assert np.array_equal(z1, z2) and np.array_equal(h1, h2)


def test_noiseless_baseline_draw_is_the_exact_skeleton():
    spec = synthetic_spec(6, 12, seed=2)
    quiet = apply_design(replace(spec, noise_cov=np.zeros((2, 2))), 1)
    panel, Z, _ = simulate_once(quiet, 7)
    W_skel = quiet.beta_w[:, None] + quiet.mu_w[None, :] + np.outer(quiet.pi, Z)
    assert np.max(np.abs(panel.W - W_skel)) <= 1e-12
    resid = panel.Y - quiet.tau * panel.W - quiet.beta_y[:, None] - quiet.mu_y[None, :]
    assert np.max(np.abs(resid)) <= 1e-12


def test_designs_differ_only_by_the_toggled_terms():
    spec = synthetic_spec(6, 12, seed=3)
    p1, z1, h1 = simulate_once(apply_design(spec, 1), 11)
    p3, z3, h3 = simulate_once(apply_design(spec, 3), 11)
    assert np.array_equal(z1, z3) and np.array_equal(h1, h3)
    dW = np.outer(spec.theta_w, h1)
    assert np.max(np.abs((p3.W - p1.W) - dW)) <= 1e-12
    dY = spec.tau * dW + np.outer(spec.theta_y, h1)
    assert np.max(np.abs((p3.Y - p1.Y) - dY)) <= 1e-12
    p2, _, _ = simulate_once(apply_design(spec, 2), 11)
    assert np.max(np.abs((p2.W - p1.W) - spec.L_w)) <= 1e-12


def test_instrument_path_moments_match_the_closed_form():
    spec = synthetic_spec(4, 60000, seed=6)
    _, Z, _ = simulate_once(apply_design(spec, 1), 13)
    want = oracles.ma2_autocovariances(np.array([1.14, 0.52]), 0.43)
    zc = Z - Z.mean()
    for lag in range(3):
        got = float(zc[: Z.size - lag] @ zc[lag:]) / Z.size
        assert got == pytest.approx(want[lag], rel=0.05)


def test_panel_noise_covariance_matches_the_spec():
    spec = synthetic_spec(10, 39, seed=7)
    d1 = apply_design(spec, 1)
    eps_y, eps_w = [], []
    for seed in range(300):
        panel, Z, _ = simulate_once(d1, seed)
        ew = panel.W - d1.beta_w[:, None] - d1.mu_w[None, :] - np.outer(d1.pi, Z)
        ey = panel.Y - d1.tau * panel.W - d1.beta_y[:, None] - d1.mu_y[None, :]
        eps_w.append(ew.ravel())
        eps_y.append(ey.ravel())
    ey, ew = np.concatenate(eps_y), np.concatenate(eps_w)
    assert float(ey @ ey) / ey.size == pytest.approx(0.001, rel=0.03)
    assert float(ew @ ew) / ew.size == pytest.approx(0.003, rel=0.03)
    assert abs(float(ey @ ew) / ey.size) <= 3e-5


# -- shock law fitting ----------------------------------------------------------------


def test_ma2_fit_reproduces_exact_autocovariances():
    for coeffs, s2 in (((1.14, 0.52), 0.43), ((0.4, -0.3), 2.0), ((0.0, 0.0), 1.0)):
        acov = oracles.ma2_autocovariances(np.array(coeffs), s2)
        (b1, b2), innov = fit_ma2(np.array(acov))
        again = oracles.ma2_autocovariances(np.array([b1, b2]), innov)
        assert np.max(np.abs(np.array(again) - np.array(acov))) <= 1e-8


def test_ma2_fit_rejects_nonpositive_variance():
    with pytest.raises(DegenerateSeries):
        fit_ma2(np.array([0.0, 0.1, 0.1]))


# -- calibration ----------------------------------------------------------------------


def exact_low_rank_panel(rng, n, T, rank):
    """A panel that satisfies the calibration model with zero noise."""
    Z = rng.standard_normal(T)
    X = np.column_stack([np.ones(T), Z])
    B = rng.standard_normal((rank, T))
    B -= (X @ np.linalg.lstsq(X, B.T, rcond=None)[0]).T  # rows orthogonal to (1, Z)
    A_y = rng.standard_normal((n, rank))
    A_w = rng.standard_normal((n, rank))
    A_y -= A_y.mean(axis=0, keepdims=True)  # factor panels column-centered
    A_w -= A_w.mean(axis=0, keepdims=True)
    L_y, L_w = A_y @ B, A_w @ B
    pi = 1.0 + 0.25 * rng.standard_normal(n)
    beta_y, beta_w = rng.standard_normal(n), rng.standard_normal(n)
    mu_y, mu_w = rng.standard_normal(T), rng.standard_normal(T)
    W = beta_w[:, None] + mu_w[None, :] + np.outer(pi, Z) + L_w
    Y = beta_y[:, None] + mu_y[None, :] + 0.7 * np.outer(rng.standard_normal(n), Z) + L_y
    panel = make_panel(Y, W)
    agg = AggregateData(Z, np.ones((T, 1)))
    return panel, agg, pi, L_y, L_w


def test_calibration_recovers_an_exact_low_rank_model():
    rng = np.random.default_rng(8)
    panel, agg, pi, L_y, L_w = exact_low_rank_panel(rng, 12, 30, rank=3)
    spec = calibrate_from_panel(panel, agg, rank=3)
    assert np.max(np.abs(spec.pi - (pi - pi.mean()))) <= 1e-8
    assert np.max(np.abs(spec.L_y - L_y)) <= 1e-7
    assert np.max(np.abs(spec.L_w - L_w)) <= 1e-7
    assert np.max(np.abs(spec.noise_cov)) <= 1e-16
    assert spec.tau == 1.43


def test_calibration_with_rank_zero_puts_everything_in_the_noise():
    rng = np.random.default_rng(9)
    n, T = 6, 18
    Z = rng.standard_normal(T)
    panel = make_panel(rng.standard_normal((n, T)), 1.0 + rng.standard_normal((n, T)))
    agg = AggregateData(Z, np.ones((T, 1)))
    spec = calibrate_from_panel(panel, agg, rank=0)
    assert np.array_equal(spec.L_y, np.zeros((n, T)))
    assert np.array_equal(spec.L_w, np.zeros((n, T)))
    X = np.column_stack([np.ones(T), Z])
    Ed = {}
    for key, M in (("y", panel.Y), ("w", panel.W)):
        Md = M - M.mean(axis=0, keepdims=True)
        Ed[key] = Md - (X @ np.linalg.lstsq(X, Md.T, rcond=None)[0]).T
    assert spec.noise_cov[0, 0] == pytest.approx(float(np.mean(Ed["y"] ** 2)), rel=1e-12)
    assert spec.noise_cov[1, 1] == pytest.approx(float(np.mean(Ed["w"] ** 2)), rel=1e-12)
    assert spec.noise_cov[0, 1] == pytest.approx(float(np.mean(Ed["y"] * Ed["w"])), rel=1e-12)


def test_calibration_factor_panel_is_the_best_low_rank_fit():
    rng = np.random.default_rng(10)
    panel, agg, *_ = exact_low_rank_panel(rng, 8, 20, rank=5)
    noisy = make_panel(
        panel.Y + 0.3 * rng.standard_normal(panel.Y.shape),
        panel.W + 0.3 * rng.standard_normal(panel.W.shape),
    )
    spec = calibrate_from_panel(noisy, agg, rank=2)
    Z = agg.Z
    X = np.column_stack([np.ones(20), Z])
    Wd = noisy.W - noisy.W.mean(axis=0, keepdims=True)
    E = Wd - (X @ np.linalg.lstsq(X, Wd.T, rcond=None)[0]).T
    best = float(np.linalg.norm(E - spec.L_w))
    assert np.linalg.matrix_rank(spec.L_w) <= 2
    for _ in range(50):
        A = rng.standard_normal((8, 2))
        B = rng.standard_normal((2, 20))
        coef, *_ = np.linalg.lstsq((A @ B).reshape(-1, 1), E.reshape(-1), rcond=None)
        assert best <= float(np.linalg.norm(E - float(coef[0]) * A @ B)) + 1e-12


def test_calibration_rank_limit():
    rng = np.random.default_rng(11)
    panel = make_panel(rng.standard_normal((5, 12)), rng.standard_normal((5, 12)))
    agg = AggregateData(rng.standard_normal(12), np.ones((12, 1)))
    with pytest.raises(RankTooLarge):
        calibrate_from_panel(panel, agg, rank=5)


# -- the Monte Carlo driver ------------------------------------------------------------


def test_single_replication_report_is_reproducible_by_hand():
    spec = synthetic_spec(9, 12, seed=2)
    report = run_monte_carlo(spec, design=3, reps=1, seed=7, tau0=1.43)

    calib_child, child = np.random.SeedSequence(7).spawn(2)
    D = calibration_exposures(spec, calib_child)
    spec_d = apply_design(spec, 3)
    panel, Z, _ = simulate_once(spec_d, child)
    agg = AggregateData(Z, np.ones((12, 1)))
    t0 = default_t0(12)
    res = estimate(panel, D, agg, WeightConfig(t0=t0))
    ts = tsls_estimate(panel, D, Z)
    target = _targets(spec, D)

    ours = report.cells["ours"]
    assert ours["delta"].bias == pytest.approx(res.delta - target["delta"], rel=1e-12)
    assert ours["pi"].bias == pytest.approx(res.pi - target["pi"], rel=1e-12)
    assert ours["tau"].bias == pytest.approx(res.tau - 1.43, rel=1e-12)
    assert report.cells["tsls"]["tau"].bias == pytest.approx(ts.tau - 1.43, rel=1e-12)

    lam = fit_lambda_model(agg, res.split)
    variance = estimate_variance(panel, res.weights.omega, agg, lam)
    reject = ar_test(res.delta, res.pi, variance, 1.43, 0.05).reject
    assert report.rejection_rate == float(reject)
    assert report.failures == 0
    assert report.design == 3 and report.reps == 1 and report.seed == 7


def test_report_identical_for_any_thread_count():
    spec = synthetic_spec(8, 12, seed=4)
    kwargs = dict(design=4, reps=6, seed=11, tau0=1.43)
    serial = run_monte_carlo(spec, threads=1, **kwargs)
    parallel = run_monte_carlo(spec, threads=4, **kwargs)
    assert serial.rejection_rate == parallel.rejection_rate
    for est in ("ours", "tsls"):
        for t in ("delta", "pi", "tau"):
            assert serial.cells[est][t].rmse == parallel.cells[est][t].rmse
            assert serial.cells[est][t].bias == parallel.cells[est][t].bias


def test_rmse_dominates_bias_in_every_cell():
    spec = synthetic_spec(8, 12, seed=5)
    report = run_monte_carlo(spec, design=2, reps=8, seed=3)
    for est_cells in report.cells.values():
        for stats in est_cells.values():
            assert stats.rmse**2 >= stats.bias**2 - 1e-12


def test_calibration_exposures_are_deterministic_and_pre_period_only():
    spec = synthetic_spec(8, 12, seed=9)
    a = calibration_exposures(spec, np.random.SeedSequence(9))
    b = calibration_exposures(spec, np.random.SeedSequence(9))
    assert np.array_equal(a.D, b.D)
    assert a.n == 8


def test_driver_validation_errors():
    spec = synthetic_spec(6, 12, seed=7)
    with pytest.raises(DataError):
        run_monte_carlo(spec, design=1, reps=0)
    with pytest.raises(DataError):
        run_monte_carlo(spec, design=1, reps=2, estimators=("ours", "theirs"))
    with pytest.raises(DataError):
        run_monte_carlo(spec, design=1, reps=2, exposure=ExposureVector(np.arange(5.0)))


def test_targets_require_exposure_correlated_with_slopes():
    spec = synthetic_spec(6, 12, seed=8)
    pic = spec.pi - spec.pi.mean()
    v = np.random.default_rng(0).standard_normal(6)
    v -= (v @ pic) / (pic @ pic) * pic
    with pytest.raises(DegenerateInstrument):
        _targets(spec, ExposureVector(v))
    good = _targets(spec, ExposureVector(spec.pi))
    assert good["tau"] == spec.tau
    assert good["delta"] == pytest.approx(spec.tau * good["pi"], rel=1e-12)
