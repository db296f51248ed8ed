# tests/test_uncertainty.py
import numpy as np
import pytest
from numpy.testing import assert_allclose

from core.context import BandConfig, BandTargetConfig, Formula, ModelSpec, TermSpec
from core.errors import DegenerateWarning, InputError
from helpers import bm_series, drift_truth, manual_fit, varying_drift_series, varying_sigma_series
from modules.basis import term_matrix
from modules.estimate import fit, inner_mode, joint_covariance
from modules.sde import SdeModel
from modules.uncertainty import (
    BandTarget,
    compute_bands,
    gaussian_draws,
    pointwise_band,
    posterior_draws,
    simultaneous_band,
)

SPEC = ModelSpec(family="BM", formulas=[
    Formula(parameter="mu"),
    Formula(parameter="sigma", terms=[
        TermSpec(kind="intercept"),
        TermSpec(kind="linear", covariate="x"),
        TermSpec(kind="spline", covariate="x", basis_dim=8),
    ]),
])

GRID = np.linspace(0.05, 0.95, 40)


@pytest.fixture
def fitted(bm_data):
    model = SdeModel.from_spec(SPEC, bm_data)
    alpha = np.array([0.0, np.log(0.5), 0.1])
    lam = [2.0]
    beta = inner_mode(model, alpha, lam).beta
    cov = joint_covariance(model, alpha, beta, lam)
    return manual_fit(model, alpha, beta, cov, lam)


# ───────────── draws ─────────────
def test_gaussian_draws_moments(rng):
    A = rng.normal(size=(3, 3))
    cov = A @ A.T + 0.1 * np.eye(3)
    mean = np.array([1.0, -2.0, 0.5])
    draws = gaussian_draws(mean, cov, 40_000, seed=1)
    assert_allclose(draws.mean(axis=0), mean, atol=0.05)
    assert_allclose(np.cov(draws.T), cov, atol=0.1 * np.abs(cov).max())


def test_zero_variance_coordinates_stay_at_mean():
    cov = np.diag([1.0, 0.0, 2.0])
    draws = gaussian_draws([0.0, 3.0, 0.0], cov, 50, seed=2)
    assert np.all(draws[:, 1] == 3.0)
    assert draws[:, 0].std() > 0


def test_zero_covariance_collapses_bands(bm_data):
    model = SdeModel.from_spec(SPEC, bm_data)
    result = manual_fit(model, [0.0, np.log(0.5), 0.1])
    for make in (pointwise_band, simultaneous_band):
        band = make(result, "sigma:s(x)", GRID, K=200, seed=1)
        assert_allclose(band.lower, band.estimate)
        assert_allclose(band.upper, band.estimate)


def test_draws_are_seeded(fitted):
    assert_allclose(posterior_draws(fitted, 10, seed=7), posterior_draws(fitted, 10, seed=7))
    a = simultaneous_band(fitted, "sigma:s(x)", GRID, K=300, seed=3)
    b = simultaneous_band(fitted, "sigma:s(x)", GRID, K=300, seed=3)
    assert_allclose(a.lower, b.lower)
    assert_allclose(a.upper, b.upper)


# ───────────── band shapes ─────────────
def test_two_draws_give_sample_range(fitted):
    draws = posterior_draws(fitted, 2, seed=4)
    C = term_matrix(fitted.model.design, ["sigma:s(x)"], {"x": GRID})
    values = draws @ C.T
    with pytest.warns(DegenerateWarning):
        band = pointwise_band(fitted, "sigma:s(x)", GRID, draws=draws)
    assert_allclose(band.lower, np.minimum(values.min(axis=0), band.estimate))
    assert_allclose(band.upper, np.maximum(values.max(axis=0), band.estimate))


def test_simultaneous_contains_pointwise(fitted):
    draws = posterior_draws(fitted, 500, seed=5)
    pw = pointwise_band(fitted, "sigma:s(x)", GRID, draws=draws)
    sim = simultaneous_band(fitted, "sigma:s(x)", GRID, draws=draws)
    assert np.all(sim.lower <= pw.lower + 1e-12)
    assert np.all(sim.upper >= pw.upper - 1e-12)
    assert sim.width.mean() > pw.width.mean()


def test_constant_target_bands_agree(fitted):
    draws = posterior_draws(fitted, 5000, seed=6)
    pw = pointwise_band(fitted, "sigma:(Intercept)", GRID, draws=draws, covariate="x")
    sim = simultaneous_band(fitted, "sigma:(Intercept)", GRID, draws=draws, covariate="x")
    assert_allclose(sim.width, pw.width, rtol=0.03)


@pytest.mark.parametrize("make", [pointwise_band, simultaneous_band])
def test_width_increases_with_level(fitted, make):
    draws = posterior_draws(fitted, 1000, seed=8)
    narrow = make(fitted, "sigma:s(x)", GRID, level=0.8, draws=draws)
    wide = make(fitted, "sigma:s(x)", GRID, level=0.95, draws=draws)
    assert np.all(wide.width >= narrow.width - 1e-12)


def test_parameter_band_on_response_scale(fitted):
    target = BandTarget("x", parameter="sigma")
    band = simultaneous_band(fitted, target, GRID, K=400, seed=9)
    assert np.all(band.lower > 0)
    assert np.all(band.lower <= band.estimate) and np.all(band.estimate <= band.upper)
    alpha = fitted.alpha
    eta = alpha[1] + alpha[2] * GRID + term_matrix(fitted.model.design, ["sigma:s(x)"], {"x": GRID}) @ fitted.gamma
    assert_allclose(band.estimate, np.exp(eta))


def test_zero_sd_gridpoint_left_out(fitted):
    grid = np.linspace(0.0, 1.0, 11)
    with pytest.warns(DegenerateWarning):
        band = simultaneous_band(fitted, "sigma:x", grid, K=300, seed=10)
    assert list(band.excluded_points) == [0]
    assert band.lower[0] == pytest.approx(band.estimate[0])


def test_simultaneous_coverage_of_fresh_draws(fitted):
    band = simultaneous_band(fitted, "sigma:s(x)", GRID, K=4000, seed=11)
    pw = pointwise_band(fitted, "sigma:s(x)", GRID, K=4000, seed=11)
    C = term_matrix(fitted.model.design, ["sigma:s(x)"], {"x": GRID})
    fresh = posterior_draws(fitted, 400, seed=12) @ C.T
    covered = np.mean([band.contains(f) for f in fresh])
    covered_pw = np.mean([pw.contains(f) for f in fresh])
    assert 0.91 <= covered <= 0.99
    assert covered_pw < covered


def test_excludes_zero_flags(fitted):
    band = pointwise_band(fitted, "sigma:(Intercept)", GRID, K=400, seed=13, covariate="x")
    # log σ intercept is far from zero relative to its SE
    assert band.zero_excluded and band.excludes_zero().all()
    frame = band.to_frame()
    assert list(frame.columns) == ["x", "estimate", "lower", "upper", "excludes_zero"]


# ───────────── errors and batch ─────────────
def test_band_errors(fitted):
    with pytest.raises(InputError):
        pointwise_band(fitted, "sigma:s(w)", GRID, K=10, seed=1)
    with pytest.raises(InputError):
        pointwise_band(fitted, "sigma:s(x)", GRID, level=1.0, K=10, seed=1)
    with pytest.raises(InputError):
        simultaneous_band(fitted, "sigma:s(x)", GRID, K=1, seed=1)
    with pytest.raises(InputError):
        simultaneous_band(fitted, "sigma:(Intercept)", GRID, K=10, seed=1)
    with pytest.raises(InputError):
        BandTarget("x")


def test_compute_bands_shares_draws(fitted):
    config = BandConfig(draws=300, grid_size=25, targets=[
        BandTargetConfig(name="smooth", covariate="x", terms=["sigma:s(x)"], band_type="both"),
        BandTargetConfig(name="sigma", covariate="x", parameter="sigma"),
    ])
    bands = compute_bands(fitted, config, seed=14)
    assert [(b.target, b.band_type) for b in bands] == [
        ("smooth", "pointwise"), ("smooth", "simultaneous"), ("sigma", "simultaneous"),
    ]
    assert all(b.grid.size == 25 for b in bands)
    with pytest.raises(InputError):
        compute_bands(fitted, BandConfig(), seed=1)


def test_term_pattern_expands_to_one_band_per_group():
    data = bm_series(n_series=4, n=60)
    exposed = np.isin(data.series, [1, 3]) & (data.column("x") > 0.3)
    data = data.with_columns(expo=exposed.astype(float))
    spec = ModelSpec(family="BM", formulas=[Formula(parameter="sigma", terms=[
        TermSpec(kind="intercept"),
        TermSpec(kind="spline", covariate="x", by="expo", by_group="series_id", basis_dim=6),
    ])])
    model = SdeModel.from_spec(spec, data)
    cov = 0.01 * np.eye(model.design.p + model.design.r)
    result = manual_fit(model, [0.0, np.log(0.5)], np.full(model.design.r, 0.1), cov)
    config = BandConfig(draws=200, grid_size=15, targets=[
        BandTargetConfig(name="diff", covariate="x", terms=["sigma:s(x):expo:series_id=*"]),
    ])
    bands = compute_bands(result, config, seed=3)
    assert [b.target for b in bands] == ["diff_1", "diff_3"]
    assert all(np.all(b.lower <= b.upper) for b in bands)

    missing = BandConfig(targets=[BandTargetConfig(name="d", covariate="x", terms=["sigma:s(y)*"])])
    with pytest.raises(InputError):
        compute_bands(result, missing, seed=3)


# ───────────── repeated-sampling behaviour ─────────────
DRIFT_SPEC = ModelSpec(family="BM", formulas=[
    Formula(parameter="mu", terms=[
        TermSpec(kind="intercept"),
        TermSpec(kind="spline", covariate="x", basis_dim=10),
    ]),
    Formula(parameter="sigma"),
])

SIGMA_SPEC = ModelSpec(family="BM", formulas=[
    Formula(parameter="mu"),
    Formula(parameter="sigma", terms=[
        TermSpec(kind="intercept"),
        TermSpec(kind="spline", covariate="x", basis_dim=8),
    ]),
])


@pytest.mark.slow
def test_pointwise_coverage_across_the_function():
    grid = np.linspace(0.05, 0.95, 30)
    truth = drift_truth(grid)
    hits = []
    for rep in range(500):
        data = varying_drift_series(seed=rep)
        result = fit(SdeModel.from_spec(DRIFT_SPEC, data), fixed={"sigma": 0.5})
        band = pointwise_band(result, BandTarget("x", parameter="mu"), grid, 0.95, K=1000, seed=rep)
        hits.append((band.lower <= truth) & (truth <= band.upper))
    assert 0.92 <= np.mean(hits) <= 0.98


@pytest.mark.slow
def test_band_width_shrinks_with_more_data():
    grid = np.linspace(0.05, 0.95, 25)
    target = BandTarget("x", parameter="sigma")
    for seed in range(3):
        widths = []
        for n in (250, 2000):
            data = varying_sigma_series(n_series=2, n=n, seed=seed)
            result = fit(SdeModel.from_spec(SIGMA_SPEC, data))
            widths.append(pointwise_band(result, target, grid, 0.95, K=1000, seed=seed).width)
        assert np.all(widths[1] < widths[0])
