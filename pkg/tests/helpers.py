# tests/helpers.py
import numpy as np
import pandas as pd

from core.series import SeriesData
from modules.estimate import ConvergenceInfo, FitResult
from modules.sde import simulate


def bm_series(n_series=3, n=60, sigma=0.5, mu=0.0, seed=0, span=10.0):
    """Irregular BM series with a covariate x = elapsed proportion and a group column."""
    children = np.random.SeedSequence(seed).spawn(n_series)
    frames = []
    for s in range(n_series):
        r = np.random.default_rng(children[s])
        t = np.sort(r.uniform(0, span, n))
        path = simulate("BM", t, 0.0, r, {"mu": mu, "sigma": sigma})
        frames.append(path.frame.assign(series_id=s, x=t / span, g=f"g{s}"))
    return SeriesData(pd.concat(frames, ignore_index=True))


def manual_fit(model, alpha, beta=None, cov=None, lam=None) -> FitResult:
    """A FitResult with chosen estimates and covariance, no optimization."""
    alpha = np.asarray(alpha, dtype=float)
    beta = np.zeros(model.design.r) if beta is None else np.asarray(beta, dtype=float)
    size = alpha.size + beta.size
    cov = np.zeros((size, size)) if cov is None else np.asarray(cov, dtype=float)
    lam = np.ones(len(model.design.penalties)) if lam is None else np.asarray(lam, dtype=float)
    info = ConvergenceInfo(True, "converged", 0, 0, 0.0, [])
    return FitResult(model, alpha, beta, lam, cov, 0.0, info)


def varying_sigma_series(n_series=2, n=300, span=10.0, seed=3):
    """BM with log σ(t) = -0.7 + 0.8 sin(2πt / span) and x = t / span."""
    sigma = lambda t: np.exp(-0.7 + 0.8 * np.sin(2 * np.pi * t / span))
    return _series_with(lambda t: 0.0, sigma, n_series, n, span, seed)


def varying_drift_series(n_series=3, n=200, span=10.0, sigma=0.5, seed=0):
    """BM with μ(x) = sin(2πx), x = t / span."""
    return _series_with(lambda t: drift_truth(t / span), sigma, n_series, n, span, seed)


def drift_truth(x):
    return np.sin(2 * np.pi * np.asarray(x, dtype=float))


def _series_with(mu, sigma, n_series, n, span, seed):
    children = np.random.SeedSequence(seed).spawn(n_series)
    frames = []
    for s in range(n_series):
        r = np.random.default_rng(children[s])
        t = np.sort(r.uniform(0, span, n))
        path = simulate("BM", t, 0.0, r, {"mu": mu, "sigma": sigma})
        frames.append(path.frame.assign(series_id=s, x=t / span))
    return SeriesData(pd.concat(frames, ignore_index=True))
