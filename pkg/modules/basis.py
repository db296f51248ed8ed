# modules/basis.py
"""
Spline bases, penalties and design matrices for the additive parameter formulas.

Smooths are cubic P-splines: B-splines on equally spaced knots with a
finite-difference penalty on adjacent coefficients. Every spline block is
reparameterized to satisfy a sum-to-zero constraint over the rows on which it
is active, so intercepts and smooths stay separately identifiable.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.interpolate import BSpline

from core.context import FAMILIES, Formula, ModelSpec, TermSpec
from core.errors import ConfigError, ExtrapolationWarning, InputError
from core.series import SeriesData

logger = logging.getLogger(__name__)

SPLINE_DEGREE = 3
SHRINKAGE_FACTOR = 1e-8

ArrayLike = Union[float, Sequence[float], np.ndarray]


class SplineBasis(NamedTuple):
    B: np.ndarray
    S: np.ndarray
    knots: np.ndarray


def spline_degree(k: int) -> int:
    return min(SPLINE_DEGREE, k - 1)


def bspline_matrix(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    return BSpline.design_matrix(np.asarray(x, dtype=float), knots, degree, extrapolate=True).toarray()


def difference_penalty(k: int, order: int) -> np.ndarray:
    D = np.diff(np.eye(k), n=order, axis=0)
    return D.T @ D


def build_spline_basis(x: ArrayLike, k: int, penalty_order: int = 2) -> SplineBasis:
    """
    Cubic B-spline basis with ``k`` functions and its difference penalty.

    Knots are equally spaced over the observed range with
    ``min(penalty_order, degree)`` extra knots beyond each end; the end knots
    are repeated as needed so the basis keeps full support on the range
    (degree drops below 3 only when ``k < 4``).
    ``rank(S) == k - penalty_order``.
    """
    x = np.asarray(x, dtype=float).ravel()
    if x.size < 2:
        raise InputError("a spline basis needs at least two covariate values")
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite covariate values")
    if penalty_order < 1:
        raise ConfigError("penalty_order must be at least 1")
    if k < 3 or k < penalty_order + 1:
        raise ConfigError(f"basis dimension {k} too small for penalty order {penalty_order}")

    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        raise InputError("covariate has zero range")

    degree = spline_degree(k)
    pad = min(penalty_order, degree)
    repeat = degree - pad + 1
    dx = (hi - lo) / (k - degree)
    knots = np.concatenate([
        lo - dx * np.arange(pad, 0, -1),
        np.full(repeat, lo),
        lo + dx * np.arange(1, k - degree),
        np.full(repeat, hi),
        hi + dx * np.arange(1, pad + 1),
    ])

    return SplineBasis(bspline_matrix(x, knots, degree), difference_penalty(k, penalty_order), knots)


def sum_to_zero(B_active: np.ndarray) -> np.ndarray:
    """Null-space map of the constraint ``1ᵀ B β = 0`` (k × (k-1)), via QR."""
    c = B_active.sum(axis=0)
    q, _ = np.linalg.qr(c[:, None], mode="complete")
    return q[:, 1:]


def _pseudo_logdet(S: np.ndarray) -> Tuple[int, float]:
    eig = np.linalg.eigvalsh(S)
    tol = max(eig.max(), 0.0) * S.shape[0] * 1e-12
    pos = eig[eig > tol]
    return int(pos.size), float(np.sum(np.log(pos)))


# ───────────────────────── design containers ──────────────────────────
@dataclass(frozen=True, eq=False)
class TermBlock:
    term_id: str
    parameter: str
    kind: str
    matrix: str  # "X" or "Z"
    cols: slice
    covariate: Optional[str] = None
    by: Optional[str] = None
    group: Optional[Tuple[str, object]] = None
    knots: Optional[np.ndarray] = None
    degree: int = 0
    constraint: Optional[np.ndarray] = None
    levels: Optional[List] = None
    data_range: Optional[Tuple[float, float]] = None
    penalty: Optional[int] = None

    @property
    def width(self) -> int:
        return self.cols.stop - self.cols.start


@dataclass(frozen=True, eq=False)
class PenaltyBlock:
    term_id: str
    cols: slice
    S: np.ndarray
    rank: int
    logdet: float


@dataclass(frozen=True, eq=False)
class DesignSet:
    X: np.ndarray
    Z: np.ndarray
    penalties: List[PenaltyBlock]
    terms: Dict[str, TermBlock]
    parameters: List[str]
    links: Dict[str, str]
    x_cols: Dict[str, slice]
    z_cols: Dict[str, slice]
    medians: Dict[str, float]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def r(self) -> int:
        return self.Z.shape[1]

    @property
    def col_map(self) -> Dict[Tuple[str, str], Tuple[str, slice]]:
        return {(b.parameter, tid): (b.matrix, b.cols) for tid, b in self.terms.items()}

    def labels(self) -> Tuple[List[str], List[str]]:
        """Column labels of X and Z (term id, plus an index for multi-column terms)."""
        x = [""] * self.p
        z = [""] * self.r
        for tid, b in self.terms.items():
            target = x if b.matrix == "X" else z
            for j in range(b.width):
                target[b.cols.start + j] = tid if b.width == 1 else f"{tid}[{j}]"
        return x, z

    def parameter_terms(self, parameter: str) -> List[str]:
        return [tid for tid, b in self.terms.items() if b.parameter == parameter]

    def block(self, term_id: str) -> TermBlock:
        try:
            return self.terms[term_id]
        except KeyError:
            raise InputError(f"unknown term id {term_id!r}; known: {sorted(self.terms)}") from None


# ───────────────────────── design assembly ──────────────────────────
def _indicator(data: SeriesData, column: Optional[str]) -> np.ndarray:
    if column is None:
        return np.ones(data.n)
    values = data.column(column)
    try:
        values = values.astype(float)
    except (TypeError, ValueError):
        raise InputError(f"by-column {column!r} must be a 0/1 indicator") from None
    if not np.all(np.isin(values, (0.0, 1.0))):
        raise InputError(f"by-column {column!r} must contain only 0 and 1")
    return values


def _covariate(data: SeriesData, column: str) -> np.ndarray:
    values = data.column(column)
    try:
        values = values.astype(float)
    except (TypeError, ValueError):
        raise InputError(f"covariate {column!r} is not numeric") from None
    if not np.all(np.isfinite(values)):
        raise InputError(f"non-finite values in covariate {column!r}")
    return values


def _typical_value(values: np.ndarray) -> float:
    """Median of a covariate; 0/1 indicators sit at their baseline level 0."""
    if np.all(np.isin(values, (0.0, 1.0))):
        return 0.0
    return float(np.median(values))


def _spline_blocks(
    term: TermSpec, parameter: str, data: SeriesData
) -> List[Tuple[str, np.ndarray, np.ndarray, dict]]:
    """(term id, constrained columns, penalty, block metadata) for one spline term."""
    x = _covariate(data, term.covariate)
    active = _indicator(data, term.by)
    basis = build_spline_basis(x, term.basis_dim, term.penalty_order)
    degree = spline_degree(term.basis_dim)
    base_id = f"{parameter}:{term.label()}"

    if term.by_group:
        groups = data.column(term.by_group)
        levels = sorted(set(groups[active > 0].tolist()), key=str)
        masks = [(f"{base_id}:{term.by_group}={lev}", active * (groups == lev), (term.by_group, lev))
                 for lev in levels]
    else:
        masks = [(base_id, active, None)]

    out = []
    for tid, mask, group in masks:
        B = basis.B * mask[:, None]
        if not mask.any():
            raise InputError(f"term {tid} is active on no rows")
        C = sum_to_zero(B) if term.centred else np.eye(term.basis_dim)
        cols = B @ C
        S = C.T @ basis.S @ C
        S = 0.5 * (S + S.T)
        if term.shrinkage:
            S = S + SHRINKAGE_FACTOR * np.trace(S) / S.shape[0] * np.eye(S.shape[0])
        meta = dict(covariate=term.covariate, by=term.by, group=group, knots=basis.knots,
                    degree=degree, constraint=C, data_range=(float(x.min()), float(x.max())))
        out.append((tid, cols, S, meta))
    return out


def build_design(formulas: Union[ModelSpec, Sequence[Formula]], data: SeriesData) -> DesignSet:
    """
    Fixed-effect matrix X, random-effect matrix Z and penalty blocks for all
    parameters of a model, in family parameter order.
    """
    if isinstance(formulas, ModelSpec):
        spec = formulas
        parameters = spec.parameters
        links = spec.links
        lookup = {p: spec.formula_for(p) for p in parameters}
    else:
        lookup = {f.parameter: f for f in formulas}
        parameters = list(lookup)
        known = {p: link for fam in FAMILIES.values() for p, link in fam}
        links = {p: known.get(p, "identity") for p in parameters}

    X_parts, Z_parts = [], []
    penalties: List[PenaltyBlock] = []
    terms: Dict[str, TermBlock] = {}
    x_cols, z_cols = {}, {}
    px = pz = 0
    medians: Dict[str, float] = {}

    for parameter in parameters:
        x0, z0 = px, pz
        for term in lookup[parameter].terms:
            for col in (term.covariate, term.by):
                if col is not None and col not in medians and term.kind != "random_intercept":
                    medians[col] = _typical_value(_covariate(data, col))

            if term.kind == "intercept":
                tid = f"{parameter}:(Intercept)"
                X_parts.append(np.ones((data.n, 1)))
                terms[tid] = TermBlock(tid, parameter, "intercept", "X", slice(px, px + 1))
                px += 1

            elif term.kind == "linear":
                tid = f"{parameter}:{term.label()}"
                col = _covariate(data, term.covariate) * _indicator(data, term.by)
                X_parts.append(col[:, None])
                terms[tid] = TermBlock(tid, parameter, "linear", "X", slice(px, px + 1),
                                       covariate=term.covariate, by=term.by)
                px += 1

            elif term.kind == "random_intercept":
                tid = f"{parameter}:{term.label()}"
                groups = data.column(term.covariate)
                levels = sorted(set(groups.tolist()), key=str)
                block = (groups[:, None] == np.asarray(levels, dtype=object)[None, :]).astype(float)
                q = block.shape[1]
                Z_parts.append(block)
                penalties.append(PenaltyBlock(tid, slice(pz, pz + q), np.eye(q), q, 0.0))
                terms[tid] = TermBlock(tid, parameter, "random_intercept", "Z", slice(pz, pz + q),
                                       covariate=term.covariate, levels=levels,
                                       penalty=len(penalties) - 1)
                pz += q

            else:
                for tid, cols, S, meta in _spline_blocks(term, parameter, data):
                    q = cols.shape[1]
                    rank, logdet = _pseudo_logdet(S)
                    Z_parts.append(cols)
                    penalties.append(PenaltyBlock(tid, slice(pz, pz + q), S, rank, logdet))
                    terms[tid] = TermBlock(tid, parameter, "spline", "Z", slice(pz, pz + q),
                                           penalty=len(penalties) - 1, **meta)
                    pz += q

        x_cols[parameter] = slice(x0, px)
        z_cols[parameter] = slice(z0, pz)

    X = np.hstack(X_parts) if X_parts else np.zeros((data.n, 0))
    Z = np.hstack(Z_parts) if Z_parts else np.zeros((data.n, 0))
    logger.info("design: %d rows, %d fixed, %d random columns, %d penalty blocks",
                data.n, X.shape[1], Z.shape[1], len(penalties))
    return DesignSet(X, Z, penalties, terms, list(parameters), links, x_cols, z_cols, medians)


# ───────────────────────── evaluation on new covariate values ──────────────────────────
def _broadcast(covariates: Mapping[str, ArrayLike]) -> int:
    sizes = {np.size(v) for v in covariates.values() if np.ndim(v) > 0}
    if len(sizes) > 1:
        raise InputError(f"covariate arrays have different lengths {sorted(sizes)}")
    return sizes.pop() if sizes else 1


def _term_columns(
    design: DesignSet, block: TermBlock, covariates: Mapping[str, ArrayLike], m: int, fill: str
) -> np.ndarray:
    def value(name, default):
        v = covariates.get(name, default)
        return np.broadcast_to(np.asarray(v, dtype=float), (m,))

    if block.kind == "intercept":
        return np.ones((m, 1))

    if block.kind == "random_intercept":
        if block.covariate not in covariates:
            return np.zeros((m, block.width))
        g = np.broadcast_to(np.asarray(covariates[block.covariate], dtype=object), (m,))
        return (g[:, None] == np.asarray(block.levels, dtype=object)[None, :]).astype(float)

    if block.covariate not in covariates and block.covariate not in design.medians:
        raise InputError(f"no value for covariate {block.covariate!r}")
    x = value(block.covariate, design.medians.get(block.covariate))
    by_default = 1.0 if fill == "unit" else design.medians.get(block.by, 1.0)
    scale = value(block.by, by_default) if block.by else np.ones(m)
    if block.group is not None:
        col, level = block.group
        if col in covariates:
            g = np.broadcast_to(np.asarray(covariates[col], dtype=object), (m,))
            scale = scale * (g == level)
        elif fill != "unit":
            scale = np.zeros(m)

    if block.kind == "linear":
        return (x * scale)[:, None]

    lo, hi = block.data_range
    if np.any(x < lo) or np.any(x > hi):
        warnings.warn(f"{block.term_id}: evaluating outside the data range [{lo:g}, {hi:g}]",
                      ExtrapolationWarning, stacklevel=3)
    return bspline_matrix(x, block.knots, block.degree) @ block.constraint * scale[:, None]


def term_matrix(
    design: DesignSet,
    term_ids: Sequence[str],
    covariates: Mapping[str, ArrayLike],
    fill: str = "unit",
) -> np.ndarray:
    """
    Rows C_x of the joint (α, β) design for a set of terms at new covariate values.

    ``fill="unit"`` evaluates each term on its own (by-indicators and group
    indicators set to 1); ``fill="median"`` fixes missing covariates and
    by-columns at their data medians (0 for 0/1 indicators) and leaves
    group-specific terms out.
    Random intercepts are at the population level unless their factor is given.
    """
    m = _broadcast(covariates)
    C = np.zeros((m, design.p + design.r))
    for tid in term_ids:
        block = design.block(tid)
        offset = 0 if block.matrix == "X" else design.p
        C[:, offset + block.cols.start: offset + block.cols.stop] += _term_columns(
            design, block, covariates, m, fill
        )
    return C


def eval_smooth(design: DesignSet, term_id: str, coefficients: ArrayLike, grid: ArrayLike) -> np.ndarray:
    """f(grid) = C_x β_term for one term, with ``coefficients`` the term's own block."""
    block = design.block(term_id)
    coefficients = np.asarray(coefficients, dtype=float).ravel()
    if coefficients.size != block.width:
        raise InputError(f"{term_id} has {block.width} coefficients, got {coefficients.size}")
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    key = block.covariate if block.covariate is not None else "_grid"
    cols = _term_columns(design, block, {key: grid}, grid.size, "unit")
    return cols @ coefficients


def term_coefficients(design: DesignSet, term_id: str, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    block = design.block(term_id)
    source = alpha if block.matrix == "X" else beta
    return np.asarray(source)[block.cols]
