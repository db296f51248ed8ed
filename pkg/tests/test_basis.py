# tests/test_basis.py
import numpy as np
import pytest
from numpy.testing import assert_allclose

from core.context import Formula, ModelSpec, TermSpec
from core.errors import ConfigError, ExtrapolationWarning, InputError
from helpers import bm_series
from modules.basis import (
    build_design,
    build_spline_basis,
    difference_penalty,
    eval_smooth,
    sum_to_zero,
    term_coefficients,
    term_matrix,
)


def spline_spec(**kw):
    sigma = Formula(parameter="sigma", terms=[
        TermSpec(kind="intercept"),
        TermSpec(kind="spline", covariate="x", basis_dim=8, **kw),
    ])
    return ModelSpec(family="BM", formulas=[Formula(parameter="mu"), sigma])


# ───────────── spline basis ─────────────
@pytest.mark.parametrize("order", [1, 2, 3])
def test_basis_is_partition_of_unity(order):
    x = np.linspace(0, 1, 50)
    basis = build_spline_basis(x, 10, penalty_order=order)
    assert basis.B.shape == (50, 10)
    assert_allclose(basis.B.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(basis.B >= 0)


def test_knots_padded_by_penalty_order():
    knots = build_spline_basis([2.0, 5.0], 10).knots
    assert knots.size == 10 + 3 + 1
    assert (knots < 2.0).sum() == 2 and (knots > 5.0).sum() == 2
    assert_allclose(np.diff(np.unique(knots)), (5.0 - 2.0) / 7)
    assert knots[3] == 2.0 and knots[10] == 5.0


def test_third_order_penalty_pads_full_degree():
    knots = build_spline_basis([2.0, 5.0], 10, penalty_order=3).knots
    assert_allclose(np.diff(knots), (5.0 - 2.0) / 7)


def test_basis_reproduces_linear_functions():
    x = np.linspace(-1, 3, 60)
    B = build_spline_basis(x, 8).B
    coef, *_ = np.linalg.lstsq(B, 2 * x - 1, rcond=None)
    assert_allclose(B @ coef, 2 * x - 1, atol=1e-10)


@pytest.mark.parametrize("k,order", [(10, 2), (6, 1), (8, 3)])
def test_penalty_rank(k, order):
    S = difference_penalty(k, order)
    assert np.linalg.matrix_rank(S) == k - order
    assert_allclose(S, S.T)


def test_penalty_null_space_contains_linear_functions():
    S = difference_penalty(10, 2)
    assert_allclose(S @ np.ones(10), 0, atol=1e-12)
    assert_allclose(S @ np.arange(10.0), 0, atol=1e-12)


def test_basis_errors():
    with pytest.raises(InputError):
        build_spline_basis([1.0, 1.0, 1.0], 10)
    with pytest.raises(InputError):
        build_spline_basis([0.0, np.nan], 10)
    with pytest.raises(ConfigError):
        build_spline_basis([0.0, 1.0], 2)
    with pytest.raises(ConfigError):
        build_spline_basis([0.0, 1.0], 3, penalty_order=3)


def test_sum_to_zero_constraint():
    B = build_spline_basis(np.linspace(0, 1, 40), 8).B
    C = sum_to_zero(B)
    assert C.shape == (8, 7)
    assert_allclose(np.ones(40) @ B @ C, 0, atol=1e-10)
    assert_allclose(C.T @ C, np.eye(7), atol=1e-12)


# ───────────── design ─────────────
def test_intercept_only_design(bm_data):
    design = build_design(ModelSpec(family="BM"), bm_data)
    assert design.p == 2 and design.r == 0
    assert_allclose(design.X, 1.0)
    assert design.parameters == ["mu", "sigma"]
    assert design.links == {"mu": "identity", "sigma": "log"}


def test_spline_block_centred_with_expected_rank(bm_data):
    design = build_design(spline_spec(), bm_data)
    block = design.block("sigma:s(x)")
    assert block.width == 7
    assert_allclose(design.Z[:, block.cols].sum(axis=0), 0, atol=1e-9)
    (pen,) = design.penalties
    assert pen.rank == 6


def test_shrinkage_makes_penalty_full_rank(bm_data):
    design = build_design(spline_spec(shrinkage=True), bm_data)
    (pen,) = design.penalties
    assert pen.rank == 7
    assert np.linalg.eigvalsh(pen.S).min() > 0


def test_random_intercept_block(bm_data):
    spec = ModelSpec(family="BM", formulas=[
        Formula(parameter="mu", terms=[TermSpec(kind="intercept"), TermSpec(kind="random_intercept", covariate="g")]),
    ])
    design = build_design(spec, bm_data)
    block = design.block("mu:re(g)")
    assert block.levels == ["g0", "g1", "g2"]
    Z = design.Z[:, block.cols]
    assert_allclose(Z.sum(axis=1), 1.0)
    assert_allclose(design.penalties[0].S, np.eye(3))
    assert design.penalties[0].logdet == 0.0


def test_by_smooth_vanishes_on_inactive_rows(bm_data):
    data = bm_data.with_columns(expo=(bm_data.column("x") > 0.5).astype(float))
    spec = ModelSpec(family="BM", formulas=[Formula(parameter="sigma", terms=[
        TermSpec(kind="intercept"),
        TermSpec(kind="spline", covariate="x", by="expo", basis_dim=6),
    ])])
    design = build_design(spec, data)
    Z = design.Z[:, design.block("sigma:s(x):expo").cols]
    inactive = data.column("expo") == 0
    assert_allclose(Z[inactive], 0.0)
    assert_allclose(Z[~inactive].sum(axis=0), 0.0, atol=1e-9)


def per_dive_difference_spec():
    return ModelSpec(family="BM", formulas=[Formula(parameter="sigma", terms=[
        TermSpec(kind="intercept"),
        TermSpec(kind="random_intercept", covariate="series_id"),
        TermSpec(kind="spline", covariate="x", basis_dim=10),
        TermSpec(kind="spline", covariate="x", by="expo", by_group="series_id", basis_dim=10),
    ])])


def test_one_difference_smooth_per_exposed_dive():
    data = bm_series(n_series=4, n=60)
    exposed = np.isin(data.series, [2, 3]) & (data.column("x") > 0.3)
    data = data.with_columns(expo=exposed.astype(float))
    design = build_design(per_dive_difference_spec(), data)

    assert design.block("sigma:s(x)").width == 9
    diff_ids = [t for t in design.terms if t.startswith("sigma:s(x):expo:")]
    assert len(diff_ids) == 2
    re_block = design.block("sigma:re(series_id)")
    assert re_block.width == 4
    assert len(design.penalties) == 1 + 1 + 2

    for tid, dive in zip(sorted(diff_ids), [2, 3]):
        block = design.block(tid)
        assert block.width == 9
        Z = design.Z[:, block.cols]
        rows = exposed & (data.series == dive)
        assert_allclose(Z[~rows], 0.0)
        assert_allclose(Z[rows].sum(axis=0), 0.0, atol=1e-9)
        assert np.abs(Z[rows]).max() > 0


def test_group_difference_smooths_need_their_level_at_prediction():
    data = bm_series(n_series=4, n=60)
    data = data.with_columns(expo=(data.series == 3).astype(float))
    design = build_design(per_dive_difference_spec(), data)
    (tid,) = [t for t in design.terms if t.startswith("sigma:s(x):expo:")]
    x = np.linspace(0.1, 0.9, 7)
    assert np.abs(term_matrix(design, [tid], {"x": x})).max() > 0
    assert_allclose(term_matrix(design, [tid], {"x": x}, fill="median"), 0.0)
    assert_allclose(term_matrix(design, [tid], {"x": x, "series_id": 2}, fill="median"), 0.0)


def test_median_fill_puts_indicators_at_baseline(bm_data):
    data = bm_data.with_columns(expo=(bm_data.column("x") > 0.5).astype(float))
    spec = ModelSpec(family="BM", formulas=[Formula(parameter="sigma", terms=[
        TermSpec(kind="intercept"),
        TermSpec(kind="linear", covariate="expo"),
        TermSpec(kind="spline", covariate="x", by="expo", basis_dim=6),
    ])])
    design = build_design(spec, data)
    assert design.medians["expo"] == 0.0
    x = np.linspace(0.1, 0.9, 5)
    assert_allclose(term_matrix(design, ["sigma:expo", "sigma:s(x):expo"], {"x": x}, fill="median"), 0.0)
    exposed = term_matrix(design, ["sigma:s(x):expo"], {"x": x, "expo": 1.0}, fill="median")
    assert_allclose(exposed, term_matrix(design, ["sigma:s(x):expo"], {"x": x}))


def test_by_column_must_be_indicator(bm_data):
    spec = ModelSpec(family="BM", formulas=[Formula(parameter="sigma", terms=[
        TermSpec(kind="spline", covariate="x", by="x", basis_dim=6),
    ])])
    with pytest.raises(InputError):
        build_design(spec, bm_data)


def test_per_parameter_column_slices(bm_data):
    spec = ModelSpec(family="BM", formulas=[
        Formula(parameter="mu", terms=[TermSpec(kind="intercept"), TermSpec(kind="spline", covariate="x", basis_dim=5)]),
        Formula(parameter="sigma", terms=[TermSpec(kind="intercept"), TermSpec(kind="linear", covariate="x")]),
    ])
    design = build_design(spec, bm_data)
    assert design.x_cols == {"mu": slice(0, 1), "sigma": slice(1, 3)}
    assert design.z_cols == {"mu": slice(0, 4), "sigma": slice(4, 4)}
    x_labels, z_labels = design.labels()
    assert x_labels == ["mu:(Intercept)", "sigma:(Intercept)", "sigma:x"]
    assert z_labels[0] == "mu:s(x)[0]"


# ───────────── evaluation ─────────────
def test_eval_smooth_reproduces_design_columns(bm_data, rng):
    design = build_design(spline_spec(), bm_data)
    block = design.block("sigma:s(x)")
    coef = rng.normal(size=block.width)
    x = bm_data.column("x").astype(float)
    assert_allclose(eval_smooth(design, "sigma:s(x)", coef, x), design.Z[:, block.cols] @ coef, atol=1e-12)


def test_term_matrix_matches_linear_predictor(bm_data, rng):
    design = build_design(spline_spec(), bm_data)
    alpha = rng.normal(size=design.p)
    beta = rng.normal(size=design.r)
    x = bm_data.column("x").astype(float)
    C = term_matrix(design, design.parameter_terms("sigma"), {"x": x})
    eta = design.X[:, design.x_cols["sigma"]] @ alpha[design.x_cols["sigma"]] + design.Z @ beta
    assert_allclose(C @ np.r_[alpha, beta], eta, atol=1e-12)
    assert term_coefficients(design, "sigma:s(x)", alpha, beta).size == 7


def test_extrapolation_warns(bm_data):
    design = build_design(spline_spec(), bm_data)
    lo, hi = design.block("sigma:s(x)").data_range
    with pytest.warns(ExtrapolationWarning):
        term_matrix(design, ["sigma:s(x)"], {"x": [lo - 0.1, hi]})


def test_unknown_term_raises(bm_data):
    design = build_design(spline_spec(), bm_data)
    with pytest.raises(InputError):
        term_matrix(design, ["sigma:s(z)"], {"x": [0.5]})
