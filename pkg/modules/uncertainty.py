# modules/uncertainty.py
"""
Posterior simulation from the Gaussian approximation N(γ̂, Σ̂), and pointwise
or simultaneous bands for smooth terms and response-scale parameters.
"""

import fnmatch
import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import linalg

from core.context import BandConfig, BandTargetConfig
from core.errors import DegenerateWarning, InputError, NumericalWarning
from modules.basis import term_matrix
from modules.estimate import FitResult
from modules.sde import inverse_link

logger = logging.getLogger(__name__)

MIN_STABLE_DRAWS = 100


# ───────────────────────── draws ──────────────────────────
def gaussian_draws(mean: np.ndarray, cov: np.ndarray, K: int, seed=None) -> np.ndarray:
    """K × len(mean) draws; coordinates with zero variance stay at the mean."""
    if K < 1:
        raise InputError("number of draws must be positive")
    mean = np.asarray(mean, dtype=float)
    cov = 0.5 * (np.asarray(cov, dtype=float) + np.asarray(cov, dtype=float).T)
    rng = np.random.default_rng(seed)
    E = rng.standard_normal((K, mean.size))
    draws = np.tile(mean, (K, 1))
    active = np.diag(cov) > 0
    if not active.any():
        return draws
    sub = cov[np.ix_(active, active)]
    try:
        L = linalg.cholesky(sub, lower=True)
    except linalg.LinAlgError:
        warnings.warn("covariance is not positive definite; clipping negative eigenvalues",
                      NumericalWarning, stacklevel=2)
        w, V = linalg.eigh(sub)
        L = V * np.sqrt(np.clip(w, 0, None))
    draws[:, active] += E[:, active] @ L.T
    return draws


def posterior_draws(fit: FitResult, K: int, seed=None) -> np.ndarray:
    """K draws of γ = (α, β) from N(γ̂, Σ̂)."""
    return gaussian_draws(fit.gamma, fit.cov, K, seed)


# ───────────────────────── targets and bands ──────────────────────────
@dataclass
class BandTarget:
    """
    What to band: either a sum of term ids (link scale, evaluated on their own)
    or a whole parameter on the response scale with other covariates fixed.
    """

    covariate: str
    terms: Optional[List[str]] = None
    parameter: Optional[str] = None
    fixed: Dict[str, Union[float, str]] = field(default_factory=dict)
    name: Optional[str] = None

    def __post_init__(self):
        if (self.terms is None) == (self.parameter is None):
            raise InputError("a band target needs exactly one of terms / parameter")
        if self.name is None:
            self.name = self.parameter or "+".join(self.terms)

    @classmethod
    def from_config(cls, cfg: BandTargetConfig) -> "BandTarget":
        return cls(cfg.covariate, cfg.terms, cfg.parameter, dict(cfg.fixed), cfg.name)

    def matrix(self, fit: FitResult, grid: np.ndarray) -> np.ndarray:
        design = fit.model.design
        covariates = {**self.fixed, self.covariate: grid}
        if self.terms is not None:
            return term_matrix(design, self.terms, covariates, fill="unit")
        if self.parameter not in design.parameters:
            raise InputError(f"unknown parameter {self.parameter!r}")
        return term_matrix(design, design.parameter_terms(self.parameter), covariates, fill="median")

    def link(self, fit: FitResult) -> str:
        return "identity" if self.parameter is None else fit.model.design.links[self.parameter]


@dataclass
class Band:
    grid: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    band_type: str
    target: str
    covariate: str = "x"
    excluded_points: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def excludes_zero(self) -> np.ndarray:
        """Grid points where the band lies entirely above or below zero."""
        return (self.lower > 0) | (self.upper < 0)

    @property
    def zero_excluded(self) -> bool:
        return bool(self.excludes_zero().any())

    def contains(self, values) -> bool:
        values = np.asarray(values, dtype=float)
        return bool(np.all((self.lower <= values) & (values <= self.upper)))

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            self.covariate: self.grid,
            "estimate": self.estimate,
            "lower": self.lower,
            "upper": self.upper,
            "excludes_zero": self.excludes_zero(),
        })


def _as_target(target: Union[str, Sequence[str], BandTarget], fit: FitResult, covariate: Optional[str]) -> BandTarget:
    if isinstance(target, BandTarget):
        return target
    terms = [target] if isinstance(target, str) else list(target)
    blocks = [fit.model.design.block(t) for t in terms]
    if covariate is None:
        covariate = next((b.covariate for b in blocks if b.covariate is not None), None)
        if covariate is None:
            raise InputError("cannot infer the band covariate; name it explicitly")
    return BandTarget(covariate, terms=terms)


def default_grid(fit: FitResult, covariate: str, size: int = 100, grid_range=None) -> np.ndarray:
    if grid_range is None:
        x = fit.model.data.column(covariate).astype(float)
        grid_range = (float(np.min(x)), float(np.max(x)))
    return np.linspace(grid_range[0], grid_range[1], size)


def _prepare(fit, target, grid, level, K, seed, draws, covariate):
    if not 0 < level < 1:
        raise InputError("band level must lie in (0, 1)")
    target = _as_target(target, fit, covariate)
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if not np.all(np.isfinite(grid)):
        raise InputError("band grid must be finite")
    if draws is None:
        if K < 2:
            raise InputError("bands need at least two posterior draws")
        draws = posterior_draws(fit, K, seed)
    if draws.shape[0] < MIN_STABLE_DRAWS:
        warnings.warn(f"only {draws.shape[0]} posterior draws; band quantiles are unstable",
                      DegenerateWarning, stacklevel=3)
    C = target.matrix(fit, grid)
    return target, grid, C @ fit.gamma, draws @ C.T


def _tail_resolved(K: int, level: float) -> bool:
    return K * (1 - level) / 2 >= 1


def _pointwise_bounds(values: np.ndarray, level: float):
    """Type-7 quantiles; the sample min/max when fewer than one draw falls in each tail."""
    if not _tail_resolved(values.shape[0], level):
        return values.min(axis=0), values.max(axis=0)
    a = 1 - level
    lo, hi = np.quantile(values, [a / 2, 1 - a / 2], axis=0, method="linear")
    return lo, hi


def pointwise_band(
    fit: FitResult,
    target,
    grid,
    level: float = 0.95,
    K: int = 1000,
    seed=None,
    draws: Optional[np.ndarray] = None,
    covariate: Optional[str] = None,
) -> Band:
    """Per-gridpoint type-7 quantiles of the K realizations (inverse link applied)."""
    target, grid, eta_hat, eta_draws = _prepare(fit, target, grid, level, K, seed, draws, covariate)
    lk = target.link(fit)
    lo, hi = _pointwise_bounds(inverse_link(lk, eta_draws), level)
    est = inverse_link(lk, eta_hat)
    return Band(grid, est, np.minimum(lo, est), np.maximum(hi, est), level, "pointwise",
                target.name, target.covariate)


def simultaneous_band(
    fit: FitResult,
    target,
    grid,
    level: float = 0.95,
    K: int = 1000,
    seed=None,
    draws: Optional[np.ndarray] = None,
    covariate: Optional[str] = None,
) -> Band:
    """
    ŷ ± q·SD with q the ``level`` quantile of max_m |C_x(γ - γ̂)|_m / SD_m over
    draws. The result is widened to the pointwise band from the same draws, so
    it always contains it. Bounds are mapped through the inverse link last.
    """
    target, grid, eta_hat, eta_draws = _prepare(fit, target, grid, level, K, seed, draws, covariate)
    dev = eta_draws - eta_hat
    sd = np.std(dev, axis=0, ddof=1)
    degenerate = sd <= 1e-12 * max(float(np.max(sd)), 1e-300)
    excluded = np.flatnonzero(degenerate)
    if excluded.size and not degenerate.all():
        warnings.warn(f"{excluded.size} grid point(s) have zero posterior SD and are left out of the max",
                      DegenerateWarning, stacklevel=2)

    if degenerate.all():
        q = 0.0
    else:
        H = np.max(np.abs(dev[:, ~degenerate]) / sd[~degenerate], axis=1)
        q = float(np.quantile(H, level, method="linear")) if _tail_resolved(H.size, level) else float(H.max())
    lower = eta_hat - q * sd
    upper = eta_hat + q * sd
    pw_lo, pw_hi = _pointwise_bounds(eta_draws, level)
    lower = np.minimum(np.minimum(lower, pw_lo), eta_hat)
    upper = np.maximum(np.maximum(upper, pw_hi), eta_hat)

    lk = target.link(fit)
    logger.debug("simultaneous band %s: critical value %.3f", target.name, q)
    return Band(grid, inverse_link(lk, eta_hat), inverse_link(lk, lower), inverse_link(lk, upper),
                level, "simultaneous", target.name, target.covariate, excluded)


def expand_target(fit: FitResult, cfg: BandTargetConfig) -> List[BandTarget]:
    """
    One target per term id matching a ``*`` pattern in ``cfg.terms``, e.g.
    ``sigma:s(diveprop):expo:series_id=*`` gives one band per exposed dive.
    """
    target = BandTarget.from_config(cfg)
    patterns = [t for t in target.terms or [] if "*" in t]
    if not patterns:
        return [target]
    if len(patterns) > 1:
        raise InputError(f"band target {cfg.name!r}: at most one term pattern")
    (pattern,) = patterns
    matches = [tid for tid in fit.model.design.terms if fnmatch.fnmatchcase(tid, pattern)]
    if not matches:
        raise InputError(f"band target {cfg.name!r}: no term matches {pattern!r}")
    prefix = pattern.split("*", 1)[0]
    out = []
    for tid in matches:
        terms = [tid if t == pattern else t for t in target.terms]
        out.append(BandTarget(cfg.covariate, terms, None, dict(cfg.fixed), f"{cfg.name}_{tid[len(prefix):]}"))
    return out


def compute_bands(fit: FitResult, config: BandConfig, seed=None) -> List[Band]:
    """All configured band targets, sharing one set of posterior draws."""
    if not config.targets:
        raise InputError("no band targets configured")
    draws = posterior_draws(fit, config.draws, seed)
    out = []
    for cfg in config.targets:
        grid = default_grid(fit, cfg.covariate, config.grid_size, cfg.grid_range)
        kinds = ["pointwise", "simultaneous"] if cfg.band_type == "both" else [cfg.band_type]
        for target in expand_target(fit, cfg):
            for kind in kinds:
                make = pointwise_band if kind == "pointwise" else simultaneous_band
                band = make(fit, target, grid, config.level, draws=draws)
                logger.info("%s band for %s: zero excluded at %d of %d points", kind, target.name,
                            int(band.excludes_zero().sum()), grid.size)
                out.append(band)
    return out
