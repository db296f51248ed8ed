# modules/estimate.py
"""
Model fitting by penalized likelihood with a Laplace-approximate marginal.

Inner layer: damped Newton for the random coefficients β given (α, λ).
Outer layer: scipy BFGS over (α, log λ) on the Laplace marginal, with
central finite-difference gradients and inner warm starts.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.optimize import OptimizeResult, minimize
from scipy.stats import norm

from core.context import OptimizerConfig
from core.errors import ConfigError, InnerConvergenceError, InputError, NumericalError, NumericalWarning
from modules.sde import LOG_2PI, SdeModel, derived_parameters, link, neg_log_lik, nll_derivatives
from modules.ssm import kalman_nll
from utils.numdiff import central_gradient, central_hessian

logger = logging.getLogger(__name__)

DEFAULT_INIT: Dict[str, float] = {
    "mu": 0.0,
    "mu1": 0.0,
    "mu2": 0.0,
    "sigma": 0.3,
    "tau": 10.0,
    "kappa": 1000.0,
}

MAX_HALVINGS = 40


# ───────────────────────── result containers ──────────────────────────
@dataclass
class ConvergenceInfo:
    converged: bool
    status: str
    outer_iterations: int
    inner_iterations: int
    grad_norm: float
    history: List[float] = field(default_factory=list)


class InnerResult(NamedTuple):
    beta: np.ndarray
    hessian: np.ndarray
    value: float
    iterations: int


@dataclass(eq=False)
class FitResult:
    model: SdeModel
    alpha: np.ndarray
    beta: np.ndarray
    lam: np.ndarray
    cov: np.ndarray
    marginal_nll: float
    convergence: ConvergenceInfo
    fixed: Dict[int, float] = field(default_factory=dict)

    @property
    def gamma(self) -> np.ndarray:
        return np.r_[self.alpha, self.beta]

    @property
    def labels(self) -> List[str]:
        x, z = self.model.design.labels()
        return x + z

    @property
    def penalty_labels(self) -> List[str]:
        return [pb.term_id for pb in self.model.design.penalties]

    def params(self) -> Dict[str, np.ndarray]:
        return self.model.params(self.alpha, self.beta)

    def derived(self) -> Dict[str, np.ndarray]:
        """Natural-scale parameter values at every data row, with OU b and σ."""
        return derived_parameters(self.model.family, self.params())

    def wald_intervals(self, level: float = 0.95) -> pd.DataFrame:
        q = norm.ppf(0.5 + level / 2)
        p = self.model.design.p
        se = np.sqrt(np.clip(np.diag(self.cov)[:p], 0, None))
        x_labels, _ = self.model.design.labels()
        return pd.DataFrame({
            "term": x_labels,
            "estimate": self.alpha,
            "se": se,
            "lower": self.alpha - q * se,
            "upper": self.alpha + q * se,
        })

    def smoothing_frame(self) -> pd.DataFrame:
        rows = []
        for pb, lam in zip(self.model.design.penalties, self.lam):
            kind = self.model.design.terms[pb.term_id].kind
            rows.append({
                "term": pb.term_id,
                "lambda": lam,
                "rank": pb.rank,
                "sd": 1 / np.sqrt(lam) if kind == "random_intercept" else np.nan,
            })
        return pd.DataFrame(rows, columns=["term", "lambda", "rank", "sd"])


# ───────────────────────── penalized objective ──────────────────────────
def penalty_matrix(model: SdeModel, lam) -> np.ndarray:
    design = model.design
    S = np.zeros((design.r, design.r))
    for pb, l in zip(design.penalties, lam):
        S[pb.cols, pb.cols] += l * pb.S
    return S


def _check_lambda(model: SdeModel, lam) -> np.ndarray:
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if lam.size != len(model.design.penalties):
        raise InputError(f"expected {len(model.design.penalties)} smoothing parameters, got {lam.size}")
    if np.any(~(lam > 0)):
        raise InputError("smoothing parameters must be positive")
    return lam


def data_nll(model: SdeModel, alpha, beta) -> float:
    if model.spec.measurement_error:
        return kalman_nll(model, alpha, beta)
    return neg_log_lik(model, alpha, beta)


def log_prior_const(model: SdeModel, lam) -> float:
    """-log of the normalizing constants of the Gaussian random-effect priors."""
    total = 0.0
    for pb, l in zip(model.design.penalties, lam):
        total += 0.5 * pb.rank * LOG_2PI - 0.5 * (pb.rank * np.log(l) + pb.logdet)
    return total


def penalized_nll(model: SdeModel, alpha, beta, lam) -> float:
    """
    Negative joint log-density of the data and the random coefficients:
    data nll + ½ Σ λ_j β_jᵀ S_j β_j - ½ Σ log det⁺(λ_j S_j) + (rank_j / 2) log 2π.
    """
    lam = _check_lambda(model, lam)
    beta = np.asarray(beta, dtype=float)
    quad = 0.0
    for pb, l in zip(model.design.penalties, lam):
        b = beta[pb.cols]
        quad += 0.5 * l * b @ pb.S @ b
    return data_nll(model, alpha, beta) + quad + log_prior_const(model, lam)


def _beta_derivatives(model: SdeModel, alpha, beta, options: OptimizerConfig):
    """Data nll with gradient and Hessian in β."""
    if model.spec.measurement_error:
        f = lambda b: kalman_nll(model, alpha, b)
        return f(beta), central_gradient(f, beta, options.fd_step), central_hessian(f, beta)
    value, grad, hess = nll_derivatives(model, alpha, beta)
    p = model.design.p
    return value, grad[p:], hess[p:, p:]


# ───────────────────────── inner Newton ──────────────────────────
def _damped_step(H: np.ndarray, g: np.ndarray, c0: float) -> np.ndarray:
    """Newton step, adding c·I (c doubling from c0) until H + cI is positive definite."""
    c = 0.0
    I = np.eye(H.shape[0])
    for _ in range(200):
        try:
            cf = linalg.cho_factor(H + c * I, lower=True)
            return -linalg.cho_solve(cf, g)
        except linalg.LinAlgError:
            c = c0 if c == 0.0 else 2 * c
    raise NumericalError("could not regularize the inner Hessian")


def inner_mode(
    model: SdeModel,
    alpha,
    lam,
    beta_init=None,
    options: Optional[OptimizerConfig] = None,
) -> InnerResult:
    """β̂ = argmin_β penalized_nll, with the undamped penalized Hessian at β̂."""
    options = options or OptimizerConfig()
    lam = _check_lambda(model, lam)
    alpha = np.asarray(alpha, dtype=float)
    r = model.design.r
    beta = np.zeros(r) if beta_init is None else np.array(beta_init, dtype=float)
    if r == 0:
        return InnerResult(beta, np.zeros((0, 0)), penalized_nll(model, alpha, beta, lam), 0)

    S = penalty_matrix(model, lam)
    const = log_prior_const(model, lam)

    def objective(b):
        return data_nll(model, alpha, b) + 0.5 * b @ S @ b + const

    for it in range(options.max_inner + 1):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            f, g, H = _beta_derivatives(model, alpha, beta, options)
        f = f + 0.5 * beta @ S @ beta + const
        g = g + S @ beta
        H = 0.5 * (H + H.T) + S
        if not (np.isfinite(f) and np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
            raise NumericalError("non-finite penalized likelihood in the inner problem")
        if np.max(np.abs(g)) < options.inner_tol * (1 + abs(f)):
            break
        if it == options.max_inner:
            raise InnerConvergenceError(f"inner Newton did not converge in {options.max_inner} iterations")

        step = _damped_step(H, g, options.damping_start)
        t = 1.0
        for _ in range(MAX_HALVINGS):
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                f_new = objective(beta + t * step)
            if np.isfinite(f_new) and f_new <= f + 1e-12 * (1 + abs(f)):
                break
            t *= 0.5
        else:
            raise InnerConvergenceError("inner line search failed to decrease the objective")
        beta = beta + t * step

    try:
        linalg.cho_factor(H, lower=True)
    except linalg.LinAlgError:
        raise NumericalError("penalized Hessian is not positive definite at the inner mode") from None
    return InnerResult(beta, H, float(f), it)


def _logdet_pd(H: np.ndarray) -> float:
    if H.size == 0:
        return 0.0
    cf, _ = linalg.cho_factor(H, lower=True)
    return 2.0 * float(np.sum(np.log(np.diag(cf))))


def laplace_terms(
    model: SdeModel, alpha, lam, beta_init=None, options: Optional[OptimizerConfig] = None
) -> Tuple[float, InnerResult]:
    inner = inner_mode(model, alpha, lam, beta_init, options)
    value = inner.value + 0.5 * _logdet_pd(inner.hessian) - 0.5 * model.design.r * LOG_2PI
    return float(value), inner


def laplace_marginal(
    model: SdeModel, alpha, lam, beta_init=None, options: Optional[OptimizerConfig] = None
) -> float:
    """-log ∫ exp(-penalized_nll) dβ ≈ penalized_nll(β̂) + ½ log det H - (r/2) log 2π."""
    value, _ = laplace_terms(model, alpha, lam, beta_init, options)
    return value


# ───────────────────────── joint curvature ──────────────────────────
def joint_precision(model: SdeModel, alpha, beta, lam, options: Optional[OptimizerConfig] = None) -> np.ndarray:
    """Hessian of penalized_nll in γ = (α, β) with λ held fixed."""
    options = options or OptimizerConfig()
    lam = _check_lambda(model, lam)
    p = model.design.p
    if model.spec.measurement_error:
        gamma = np.r_[alpha, beta]
        H = central_hessian(lambda g: penalized_nll(model, g[:p], g[p:], lam), gamma)
    else:
        _, _, H = nll_derivatives(model, alpha, beta)
        H[p:, p:] += penalty_matrix(model, lam)
    return 0.5 * (H + H.T)


def joint_covariance(
    model: SdeModel,
    alpha,
    beta,
    lam,
    options: Optional[OptimizerConfig] = None,
    free: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Σ̂ = inverse joint precision; fixed coefficients (``free`` False) get zero variance."""
    H = joint_precision(model, alpha, beta, lam, options)
    size = H.shape[0]
    free = np.ones(size, bool) if free is None else np.asarray(free, bool)
    if not free.any():
        return np.zeros((size, size))
    Hf = H[np.ix_(free, free)]
    try:
        cf = linalg.cho_factor(Hf, lower=True)
        Sf = linalg.cho_solve(cf, np.eye(Hf.shape[0]))
    except linalg.LinAlgError:
        warnings.warn("joint Hessian is singular; using a pseudo-inverse", NumericalWarning, stacklevel=2)
        Sf = linalg.pinvh(Hf)
    cov = np.zeros((size, size))
    cov[np.ix_(free, free)] = 0.5 * (Sf + Sf.T)
    return cov


# ───────────────────────── initial values ──────────────────────────
def _alpha_entries(model: SdeModel, values: Mapping[str, float], natural: bool = True) -> Dict[int, float]:
    """
    Resolve {parameter name: natural-scale intercept} or {term id: raw coefficient}
    to α indices.
    """
    design = model.design
    out = {}
    for key, value in values.items():
        if key in design.parameters:
            tid = f"{key}:(Intercept)"
            if tid not in design.terms:
                raise ConfigError(f"parameter {key!r} has no intercept to initialise")
            if design.links[key] == "log" and not value > 0:
                raise ConfigError(f"initial value for {key!r} must be positive")
            out[design.terms[tid].cols.start] = float(link(design.links[key], value))
        elif key in design.terms and design.terms[key].matrix == "X":
            out[design.terms[key].cols.start] = float(value)
        else:
            raise ConfigError(f"cannot initialise {key!r}: not a parameter or fixed-effect term")
    return out


def default_init(model: SdeModel, init: Optional[Mapping[str, float]] = None) -> np.ndarray:
    """
    Fixed-effect starting values: drift intercepts 0 (OU: mean response, over
    unexposed rows when an exposure column is set), σ = 0.3, τ = 10, κ = 1000.
    """
    values = {p: DEFAULT_INIT[p] for p in model.design.parameters if f"{p}:(Intercept)" in model.design.terms}
    if model.family.startswith("OU"):
        z = model.data.z
        if model.spec.exposure_column:
            unexposed = model.data.column(model.spec.exposure_column).astype(float) == 0
            if unexposed.any():
                z = z[unexposed]
        centre = np.nanmean(z, axis=0)
        names = ["mu"] if model.family == "OU1" else ["mu1", "mu2"]
        for j, name in enumerate(names):
            if name in values:
                values[name] = float(centre[j])
    alpha = np.zeros(model.design.p)
    entries = _alpha_entries(model, values)
    entries.update(_alpha_entries(model, dict(init or {})))
    for k, v in entries.items():
        alpha[k] = v
    return alpha


# ───────────────────────── outer optimizer ──────────────────────────
class _MarginalObjective:
    """
    Laplace marginal as a function of x = (free α, log λ), with a central
    finite-difference gradient. Each evaluation warm-starts the inner Newton
    from the β of the last point with a finite value.
    """

    def __init__(
        self,
        model: SdeModel,
        options: OptimizerConfig,
        alpha0: np.ndarray,
        fixed: Dict[int, float],
        beta0: np.ndarray,
    ):
        self.model = model
        self.options = options
        self.alpha0 = alpha0.copy()
        for k, v in fixed.items():
            self.alpha0[k] = v
        self.free = np.array([k not in fixed for k in range(model.design.p)], bool)
        self.beta = beta0.copy()
        self.inner_iterations = 0
        self._last: Optional[Tuple[bytes, float, np.ndarray]] = None

    def pack(self, alpha, lam) -> np.ndarray:
        return np.r_[np.asarray(alpha)[self.free], np.log(lam)]

    def unpack(self, x) -> Tuple[np.ndarray, np.ndarray]:
        alpha = self.alpha0.copy()
        k = int(self.free.sum())
        alpha[self.free] = x[:k]
        return alpha, np.exp(x[k:])

    def __call__(self, x, beta_start) -> Tuple[float, Optional[np.ndarray]]:
        alpha, lam = self.unpack(x)
        if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
            return np.inf, None
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                value, inner = laplace_terms(self.model, alpha, lam, beta_start, self.options)
        except (InnerConvergenceError, NumericalError, InputError) as e:
            logger.debug("trial point rejected: %s", e)
            return np.inf, None
        self.inner_iterations += inner.iterations
        return (value if np.isfinite(value) else np.inf), inner.beta

    def gradient(self, x, f0, beta0) -> np.ndarray:
        h = self.options.fd_step * np.maximum(1.0, np.abs(x))
        g = np.zeros_like(x)
        for k in range(x.size):
            e = np.zeros_like(x)
            e[k] = h[k]
            fp, _ = self(x + e, beta0)
            fm, _ = self(x - e, beta0)
            if np.isfinite(fp) and np.isfinite(fm):
                g[k] = (fp - fm) / (2 * h[k])
            elif np.isfinite(fp):
                g[k] = (fp - f0) / h[k]
            elif np.isfinite(fm):
                g[k] = (f0 - fm) / h[k]
            else:
                raise NumericalError(f"marginal likelihood undefined around outer coordinate {k}")
        return g

    def value_and_grad(self, x) -> Tuple[float, np.ndarray]:
        """Objective for ``minimize(jac=True)``; non-finite trial points return (inf, 0)."""
        x = np.asarray(x, dtype=float)
        key = x.tobytes()
        if self._last is not None and self._last[0] == key:
            return self._last[1], self._last[2].copy()
        f, beta = self(x, self.beta)
        if beta is None:
            return np.inf, np.zeros_like(x)
        self.beta = beta
        g = self.gradient(x, f, beta)
        self._last = (key, f, g)
        return f, g.copy()


def _status(res: OptimizeResult, grad_norm: float, tol: float) -> str:
    if res.status == 0 or grad_norm < tol:
        return "converged"
    if res.status == 1:
        return "max_iter"
    return "line_search_failed"


def _outer_bfgs(obj: _MarginalObjective, x0: np.ndarray, options: OptimizerConfig):
    f0, _ = obj.value_and_grad(x0)
    if not np.isfinite(f0):
        raise NumericalError("initial values give an undefined marginal likelihood")
    history = [f0]
    if x0.size == 0:
        return x0, obj.beta, ConvergenceInfo(True, "converged", 0, obj.inner_iterations, 0.0, history)

    def record(intermediate_result: OptimizeResult):
        history.append(float(intermediate_result.fun))
        logger.debug("outer %d: marginal nll %.6f", len(history) - 1, intermediate_result.fun)

    with np.errstate(over="ignore", invalid="ignore"):
        res = minimize(
            obj.value_and_grad,
            x0,
            jac=True,
            method="BFGS",
            callback=record,
            options={"gtol": options.outer_tol, "norm": np.inf, "maxiter": options.max_outer},
        )
    grad_norm = float(np.max(np.abs(res.jac), initial=0.0))
    status = _status(res, grad_norm, options.outer_tol)
    if status == "line_search_failed":
        logger.debug("BFGS stopped: %s", res.message)
    return res.x, obj.beta, ConvergenceInfo(
        converged=status == "converged",
        status=status,
        outer_iterations=int(res.nit),
        inner_iterations=obj.inner_iterations,
        grad_norm=grad_norm,
        history=history,
    )


def fit(
    model: SdeModel,
    init: Optional[Mapping[str, float]] = None,
    options: Optional[OptimizerConfig] = None,
    fixed: Optional[Mapping[str, float]] = None,
) -> FitResult:
    """
    Maximize the Laplace marginal likelihood jointly over fixed effects and
    log smoothing parameters. ``fixed`` pins coefficients (same keys as ``init``).
    Non-convergence is flagged on the result, not raised.
    """
    options = options or OptimizerConfig()
    alpha0 = default_init(model, init)
    pinned = _alpha_entries(model, dict(fixed or {}))
    lam0 = np.full(len(model.design.penalties), options.lambda_init)

    obj = _MarginalObjective(model, options, alpha0, pinned, np.zeros(model.design.r))
    x0 = obj.pack(obj.alpha0, lam0)
    logger.info("fitting %s: %d fixed effects (%d free), %d random coefficients, %d smoothing parameters",
                model.family, model.design.p, int(obj.free.sum()), model.design.r, lam0.size)

    x, beta, info = _outer_bfgs(obj, x0, options)
    alpha, lam = obj.unpack(x)
    f, inner = laplace_terms(model, alpha, lam, beta, options)
    free = np.r_[obj.free, np.ones(model.design.r, bool)]
    cov = joint_covariance(model, alpha, inner.beta, lam, options, free=free)

    if info.converged:
        logger.info("converged after %d outer iterations: marginal nll %.6f", info.outer_iterations, f)
    else:
        logger.warning("outer optimizer stopped (%s) with |g|∞ = %.3e", info.status, info.grad_norm)
    return FitResult(model, alpha, inner.beta, lam, cov, float(f), info, fixed=pinned)
