"""Deterministic controls and the AR(1) weighting kernel."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aggshock.errors import DataError, DegenerateInstrument, DegenerateSeries, RankDeficientPsi
from aggshock.panel import AggregateData, SampleSplit
from aggshock.tsmodel import (
    PsiSpec,
    build_lambda_post,
    build_psi,
    fit_ar1,
    fit_lambda_model,
    z_residuals,
)

import oracles


def test_build_psi_layout():
    Psi = build_psi(10, PsiSpec(trend_degree=2))
    assert Psi.shape == (10, 3)
    assert np.all(Psi[:, 0] == 1.0)
    t = np.arange(1, 11) / 10.0
    assert np.allclose(Psi[:, 1], t)
    assert np.allclose(Psi[:, 2], t**2)
    extra = np.arange(10.0)[:, None]
    assert build_psi(10, PsiSpec(extra=extra)).shape == (10, 2)
    with pytest.raises(RankDeficientPsi):
        build_psi(10, PsiSpec(extra=np.ones((10, 1))))  # duplicates the constant
    with pytest.raises(DataError):
        PsiSpec(trend_degree=-1)


def test_z_residuals_orthogonal_to_controls():
    rng = np.random.default_rng(0)
    Z = rng.standard_normal(15)
    Psi = build_psi(15, PsiSpec(trend_degree=1))
    periods = np.arange(5, 15)
    resid = z_residuals(Z, Psi, periods)
    assert np.max(np.abs(Psi[periods].T @ resid)) <= 1e-10 * max(1.0, float(np.abs(Z).max()))


def test_fit_ar1_recovers_the_coefficient():
    rng = np.random.default_rng(1)
    rho = 0.6
    x = np.zeros(20000)
    for t in range(1, x.size):
        x[t] = rho * x[t - 1] + rng.standard_normal()
    assert fit_ar1(x) == pytest.approx(rho, abs=0.03)


@given(st.integers(0, 2**32 - 1))
def test_fit_ar1_scale_invariant(seed):
    r = np.random.default_rng(seed).standard_normal(30)
    assert fit_ar1(16.0 * r) == fit_ar1(r)  # power-of-two scaling is exact


def test_fit_ar1_clamps_explosive_series():
    up = 1.5 ** np.arange(12.0)
    assert fit_ar1(up) == 0.99
    assert fit_ar1(up * np.array([-1.0, 1.0] * 6)) == -0.99


def test_fit_ar1_degenerate_series():
    with pytest.raises(DegenerateSeries):
        fit_ar1(np.array([1.0, 2.0]))
    with pytest.raises(DegenerateSeries):
        fit_ar1(np.zeros(10))


@pytest.mark.parametrize("rho", [0.0, 0.4, -0.9, 0.99])
def test_lambda_post_matches_brute_force(rho):
    T, T0 = 13, 5
    lam = build_lambda_post(rho, T, T0)
    assert lam.lambda_post.shape == (T - T0, T)
    assert np.max(np.abs(lam.lambda_post - oracles.lambda_post_brute(rho, T, T0))) <= 1e-14


@pytest.mark.parametrize("rho", [0.3, -0.8, 0.99])
def test_kernel_gram_matches_closed_form(rho):
    T, T0 = 12, 4
    lam = build_lambda_post(rho, T, T0).lambda_post
    gram = lam @ lam.T
    for r, t in enumerate(range(T0 + 1, T + 1)):
        for c, s in enumerate(range(T0 + 1, T + 1)):
            assert gram[r, c] == pytest.approx(oracles.ar1_kernel_entry(rho, t, s), rel=1e-12)


def test_lambda_post_selector_rows_at_zero_rho():
    lam = build_lambda_post(0.0, 9, 3).lambda_post
    expected = np.eye(9)[3:]
    assert np.array_equal(lam, expected)


def test_lambda_post_validation():
    with pytest.raises(DataError):
        build_lambda_post(0.5, 10, 0)
    with pytest.raises(DataError):
        build_lambda_post(0.5, 10, 10)
    with pytest.raises(DataError):
        build_lambda_post(1.5, 10, 3)


def test_fit_lambda_model_is_the_documented_composition():
    rng = np.random.default_rng(2)
    T = 18
    Z = np.cumsum(rng.standard_normal(T)) * 0.5
    agg = AggregateData(Z, build_psi(T, PsiSpec(trend_degree=1)))
    split = SampleSplit(T0=6, T1=12)
    lam = fit_lambda_model(agg, split)
    post = np.arange(6, T)
    rho = fit_ar1(z_residuals(Z, agg.Psi, post))
    assert lam.rho_hat == rho
    assert np.array_equal(lam.lambda_post, build_lambda_post(rho, T, 6).lambda_post)


def test_fit_lambda_model_degenerate_instrument():
    T = 12
    t = np.arange(1, T + 1) / T
    agg = AggregateData(2.0 + 3.0 * t, build_psi(T, PsiSpec(trend_degree=1)))
    with pytest.raises(DegenerateInstrument):
        fit_lambda_model(agg, SampleSplit(T0=4, T1=8))
