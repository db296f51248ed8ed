# modules/sde.py
"""
Brownian motion and Ornstein-Uhlenbeck families with varying coefficients.

Parameters are frozen at the start of every observation interval, so each
transition is exactly Gaussian. OU processes are parameterized by
(a, log τ, log κ); b = 1/τ and σ = √(2κ/τ) are derived.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Dict, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy.stats import norm

from core.context import FAMILIES, ModelSpec
from core.errors import InputError
from core.series import SeriesData
from modules.basis import DesignSet, build_design

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2 * np.pi))

ParamValue = Union[float, np.ndarray, Callable[[np.ndarray], np.ndarray]]


class Transition(NamedTuple):
    mean: np.ndarray
    var: np.ndarray

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.var)

    def logpdf(self, z) -> np.ndarray:
        return norm.logpdf(z, loc=self.mean, scale=self.sd)

    def pdf(self, z) -> np.ndarray:
        return norm.pdf(z, loc=self.mean, scale=self.sd)


def _check_dt(dt) -> np.ndarray:
    dt = np.asarray(dt, dtype=float)
    if np.any(~(dt > 0)):
        raise InputError("time step must be positive")
    return dt


def bm_transition(z0, a, sigma, dt) -> Transition:
    """Z(t+Δ) | Z(t) = z0 ~ N(z0 + aΔ, σ²Δ)."""
    dt = _check_dt(dt)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise InputError("sigma must be non-negative")
    return Transition(np.asarray(z0, dtype=float) + np.asarray(a, dtype=float) * dt, sigma ** 2 * dt)


def ou_transition(z0, a, tau, kappa, dt) -> Transition:
    """Z(t+Δ) | Z(t) = z0 ~ N(a + e^{-Δ/τ}(z0 - a), κ(1 - e^{-2Δ/τ}))."""
    dt = _check_dt(dt)
    tau = np.asarray(tau, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    if np.any(~(tau > 0)) or np.any(~(kappa > 0)):
        raise InputError("tau and kappa must be positive")
    a = np.asarray(a, dtype=float)
    decay = np.exp(-dt / tau)
    return Transition(a + decay * (np.asarray(z0, dtype=float) - a), -kappa * np.expm1(-2 * dt / tau))


def ou_b(tau):
    return 1.0 / np.asarray(tau, dtype=float)


def ou_sigma(tau, kappa):
    return np.sqrt(2 * np.asarray(kappa, dtype=float) / np.asarray(tau, dtype=float))


def inverse_link(link: str, eta):
    return np.exp(eta) if link == "log" else np.asarray(eta, dtype=float)


def link(link_name: str, value):
    return np.log(value) if link_name == "log" else np.asarray(value, dtype=float)


# ───────────────────────── linear predictors ──────────────────────────
def linear_predictors(design: DesignSet, alpha, beta) -> np.ndarray:
    """η for every row, shape (n, P), columns in parameter order."""
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    eta = np.empty((design.X.shape[0], len(design.parameters)))
    for k, p in enumerate(design.parameters):
        xs, zs = design.x_cols[p], design.z_cols[p]
        eta[:, k] = design.X[:, xs] @ alpha[xs] + design.Z[:, zs] @ beta[zs]
    return eta


def param_at(design: DesignSet, alpha, beta, row: Optional[int] = None) -> Dict[str, np.ndarray]:
    """θ = h⁻¹(xᵀα + zᵀβ) per parameter, for one row or all rows."""
    eta = linear_predictors(design, alpha, beta)
    if row is not None:
        eta = eta[row]
        return {p: float(inverse_link(design.links[p], eta[k])) for k, p in enumerate(design.parameters)}
    return {p: inverse_link(design.links[p], eta[:, k]) for k, p in enumerate(design.parameters)}


def derived_parameters(family: str, params: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    out = dict(params)
    if family.startswith("OU"):
        out["b"] = ou_b(params["tau"])
        out["sigma"] = ou_sigma(params["tau"], params["kappa"])
    return out


# ───────────────────────── model bundle ──────────────────────────
@dataclass(frozen=True, eq=False)
class SdeModel:
    spec: ModelSpec
    data: SeriesData
    design: DesignSet

    @classmethod
    def from_spec(cls, spec: ModelSpec, data: SeriesData) -> "SdeModel":
        if data.dim != spec.dim:
            raise InputError(f"{spec.family} needs {spec.dim}-D observations, data has {data.dim}")
        return cls(spec, data, build_design(spec, data))

    @cached_property
    def pairs(self) -> np.ndarray:
        pairs = self.data.pair_index()
        if pairs.size == 0:
            raise InputError("no series has two or more observations")
        return pairs

    @cached_property
    def dt(self) -> np.ndarray:
        t = self.data.t
        return t[self.pairs + 1] - t[self.pairs]

    @property
    def family(self) -> str:
        return self.spec.family

    def eta(self, alpha, beta) -> np.ndarray:
        return linear_predictors(self.design, alpha, beta)

    def params(self, alpha, beta) -> Dict[str, np.ndarray]:
        return param_at(self.design, alpha, beta)


# ───────────────────────── transition moments and derivatives ──────────────────────────
def _moments(family: str, eta: np.ndarray, z0: np.ndarray, dt: np.ndarray):
    """
    Mean m (N, d), variance v (N,) and their first/second derivatives with
    respect to the linear predictors of one transition per row.
    """
    n, d = z0.shape
    P = eta.shape[1]
    dm = np.zeros((n, d, P))
    d2m = np.zeros((n, d, P, P))
    dv = np.zeros((n, P))
    d2v = np.zeros((n, P, P))

    if family == "BM":
        a, log_sigma = eta[:, 0], eta[:, 1]
        m = z0 + (a * dt)[:, None]
        v = np.exp(2 * log_sigma) * dt
        dm[:, :, 0] = dt[:, None]
        dv[:, 1] = 2 * v
        d2v[:, 1, 1] = 4 * v
        return m, v, dm, d2m, dv, d2v

    a = eta[:, :d]
    iu, iw = d, d + 1
    kappa = np.exp(eta[:, iw])
    s = dt * np.exp(-eta[:, iu])
    e = np.exp(-s)
    D = z0 - a
    m = a + e[:, None] * D
    v = -kappa * np.expm1(-2 * s)
    es = e * s
    for j in range(d):
        dm[:, j, j] = 1 - e
        d2m[:, j, j, iu] = d2m[:, j, iu, j] = -es
    dm[:, :, iu] = D * es[:, None]
    d2m[:, :, iu, iu] = D * (es * (s - 1))[:, None]
    dv[:, iu] = -2 * kappa * e ** 2 * s
    dv[:, iw] = v
    d2v[:, iu, iu] = -2 * kappa * e ** 2 * s * (2 * s - 1)
    d2v[:, iu, iw] = d2v[:, iw, iu] = dv[:, iu]
    d2v[:, iw, iw] = v
    return m, v, dm, d2m, dv, d2v


def _gaussian_terms(z1, m, v, dm, d2m, dv, d2v, order: int):
    """Per-row nll of N(m, vI) at z1 with gradient/Hessian in η (chain rule)."""
    d = z1.shape[1]
    r = z1 - m
    R2 = np.sum(r ** 2, axis=1)
    nll = 0.5 * d * (LOG_2PI + np.log(v)) + R2 / (2 * v)
    if order == 0:
        return nll, None, None
    rdm = np.einsum("nj,njk->nk", r, dm)
    grad = 0.5 * d * dv / v[:, None] - rdm / v[:, None] - (R2 / (2 * v ** 2))[:, None] * dv
    if order == 1:
        return nll, grad, None
    dvdv = dv[:, :, None] * dv[:, None, :]
    cross = rdm[:, :, None] * dv[:, None, :]
    hess = (
        0.5 * d * (d2v / v[:, None, None] - dvdv / (v ** 2)[:, None, None])
        + (np.einsum("njk,njl->nkl", dm, dm) - np.einsum("nj,njkl->nkl", r, d2m)) / v[:, None, None]
        + (cross + np.swapaxes(cross, 1, 2)) / (v ** 2)[:, None, None]
        - (R2 / (2 * v ** 2))[:, None, None] * d2v
        + (R2 / v ** 3)[:, None, None] * dvdv
    )
    return nll, grad, hess


def pair_terms(model: SdeModel, alpha, beta, order: int = 0):
    """Per-transition nll (and η-derivatives up to ``order``) for every within-series pair."""
    rows = model.pairs
    z = model.data.z
    eta = model.eta(alpha, beta)[rows]
    moments = _moments(model.family, eta, z[rows], model.dt)
    return _gaussian_terms(z[rows + 1], *moments, order=order)


def neg_log_lik(model: SdeModel, alpha, beta) -> float:
    """-Σ log p(z_{i+1} | z_i) over consecutive rows of the same series."""
    nll, _, _ = pair_terms(model, alpha, beta, order=0)
    return float(np.sum(nll))


def _joint_columns(model: SdeModel):
    design = model.design
    rows = model.pairs
    for k, p in enumerate(design.parameters):
        xs, zs = design.x_cols[p], design.z_cols[p]
        idx = np.r_[np.arange(xs.start, xs.stop), design.p + np.arange(zs.start, zs.stop)]
        M = np.hstack([design.X[rows][:, xs], design.Z[rows][:, zs]])
        yield k, idx, M


def nll_derivatives(model: SdeModel, alpha, beta, order: int = 2):
    """Data nll with analytic gradient and Hessian in γ = (α, β)."""
    nll, g_eta, h_eta = pair_terms(model, alpha, beta, order=order)
    size = model.design.p + model.design.r
    grad = np.zeros(size)
    hess = np.zeros((size, size)) if order > 1 else None
    blocks = list(_joint_columns(model))
    for k, idx, M in blocks:
        grad[idx] += M.T @ g_eta[:, k]
        if order > 1:
            for l, jdx, N in blocks:
                hess[np.ix_(idx, jdx)] += M.T @ (h_eta[:, k, l][:, None] * N)
    return float(np.sum(nll)), grad, hess


# ───────────────────────── simulation ──────────────────────────
def _affine_recursion(z0: np.ndarray, T: np.ndarray, c: np.ndarray, sd: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """z[i+1] = T[i] z[i] + c[i] + sd[i] eps[i]."""
    steps = c + sd[:, None] * eps
    if np.all(T == 1.0):
        return np.vstack([z0, z0 + np.cumsum(steps, axis=0)])
    z = np.empty((len(T) + 1, z0.size))
    z[0] = z0
    for i in range(len(T)):
        z[i + 1] = T[i] * z[i] + steps[i]
    return z


def _step_coefficients(family: str, values: Mapping[str, np.ndarray], dt: np.ndarray, d: int):
    if family == "BM":
        sigma = values["sigma"]
        if np.any(sigma < 0):
            raise InputError("sigma must be non-negative")
        return np.ones_like(dt), (values["mu"] * dt)[:, None], sigma * np.sqrt(dt)
    mus = [values["mu"]] if d == 1 else [values[f"mu{j + 1}"] for j in range(d)]
    a = np.column_stack(mus)
    tau, kappa = values["tau"], values["kappa"]
    if np.any(~(tau > 0)) or np.any(~(kappa > 0)):
        raise InputError("tau and kappa must be positive")
    T = np.exp(-dt / tau)
    return T, (1 - T)[:, None] * a, np.sqrt(-kappa * np.expm1(-2 * dt / tau))


def simulate(
    family: str,
    times: Sequence[float],
    z0,
    seed=None,
    params: Optional[Mapping[str, ParamValue]] = None,
) -> SeriesData:
    """
    Exact sequential draws of one series on ``times``.

    ``params`` maps each family parameter to a constant, an array of values at
    the grid times, or a callable of time; interval i uses the value at times[i].
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise InputError("empty time grid")
    if np.any(np.diff(times) <= 0):
        raise InputError("times must be strictly increasing")
    names = [p for p, _ in FAMILIES[family]]
    d = 2 if family == "OU2" else 1
    z0 = np.broadcast_to(np.asarray(z0, dtype=float).ravel(), (d,)).copy()
    params = dict(params or {})
    missing = [p for p in names if p not in params]
    if missing:
        raise InputError(f"missing parameter value(s) {missing} for {family}")

    values = {}
    for name in names:
        v = params[name]
        v = v(times) if callable(v) else v
        values[name] = np.broadcast_to(np.asarray(v, dtype=float), times.shape)[:-1]

    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((times.size - 1, d))
    T, c, sd = _step_coefficients(family, values, np.diff(times), d)
    z = _affine_recursion(z0, T, c, sd, eps)
    return SeriesData.from_arrays(times, z)


def simulate_fitted(model: SdeModel, alpha, beta, seed=None, series: Optional[Sequence] = None) -> SeriesData:
    """
    Simulate every (or the selected) series of the model's data template under
    the given coefficients, starting from each series' first observation.
    """
    rng = np.random.default_rng(seed)
    data = model.data if series is None else model.data.subset(series)
    keep = np.ones(model.data.n, bool) if series is None else np.isin(model.data.series, list(series))
    values = {p: v[keep] for p, v in model.params(alpha, beta).items()}
    z_obs = data.z
    t = data.t
    z_sim = np.empty_like(z_obs)
    for _, a, b in data.segments():
        seg = {p: v[a:b - 1] for p, v in values.items()}
        if b - a < 2:
            z_sim[a] = z_obs[a]
            continue
        eps = rng.standard_normal((b - a - 1, data.dim))
        T, c, sd = _step_coefficients(model.family, seg, np.diff(t[a:b]), data.dim)
        z_sim[a:b] = _affine_recursion(z_obs[a], T, c, sd, eps)
    return data.with_response(z_sim)
