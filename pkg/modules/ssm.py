# modules/ssm.py
"""
Linear-Gaussian state-space form of the SDE families, for tracks observed
with known, time-varying measurement error.

    state:        Z_{i+1} = T_i Z_i + c_i + η_i,   η_i ~ N(0, Q_i I)
    observation:  Y_i     = Z_i + ε_i,             ε_i ~ N(0, Ω_i)

Each series starts from N(Y_1, Ω_1 + κ_1 I) (OU) or N(Y_1, Ω_1) (BM); the
first observation only anchors the filter and does not enter the likelihood.
"""

import logging
import warnings
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.stats import norm

from core.errors import InputError, NumericalError, NumericalWarning
from modules.sde import LOG_2PI, SdeModel

logger = logging.getLogger(__name__)

ARGOS_RADII = ((-50.0, 100.0), (-70.0, 500.0), (-80.0, 1000.0), (-90.0, 2000.0))
ARGOS_FALLBACK_RADIUS = 10000.0


# ───────────────────────── observation error models ──────────────────────────
def ellipse_to_cov(semi_major: float, semi_minor: float, orientation_deg: float) -> np.ndarray:
    """
    2×2 covariance from an error ellipse (x = easting, y = northing).

    Orientation is the bearing of the semi-major axis, clockwise from north.
    Each semi-axis is read as √2 standard deviations along its direction.
    """
    return ellipses_to_cov([semi_major], [semi_minor], [orientation_deg])[0]


def ellipses_to_cov(semi_major, semi_minor, orientation_deg) -> np.ndarray:
    M = np.asarray(semi_major, dtype=float)
    m = np.asarray(semi_minor, dtype=float)
    theta = np.deg2rad(np.asarray(orientation_deg, dtype=float))
    finite = np.isfinite(M) & np.isfinite(m) & np.isfinite(theta)
    if np.any(M[finite] < 0) or np.any(m[finite] < 0):
        raise InputError("ellipse semi-axes must be non-negative")
    if np.any(m[finite] > M[finite]):
        raise InputError("semi-minor axis exceeds semi-major axis")
    u = np.stack([np.sin(theta), np.cos(theta)], axis=-1)
    w = np.stack([np.cos(theta), -np.sin(theta)], axis=-1)
    cov = (M ** 2 / 2)[:, None, None] * u[:, :, None] * u[:, None, :] \
        + (m ** 2 / 2)[:, None, None] * w[:, :, None] * w[:, None, :]
    cov[~finite] = np.nan
    return cov


def goniometer_radius(signal_db) -> np.ndarray:
    s = np.asarray(signal_db, dtype=float)
    radius = np.full(s.shape, ARGOS_FALLBACK_RADIUS)
    for threshold, r in reversed(ARGOS_RADII):
        radius = np.where(s >= threshold, r, radius)
    return np.where(np.isfinite(s), radius, np.nan)


def goniometer_cov(signal_db) -> np.ndarray:
    """Isotropic covariance r²/2 · I from goniometer signal strength (dB)."""
    r = goniometer_radius(np.atleast_1d(signal_db))
    return (r ** 2 / 2)[:, None, None] * np.eye(2)[None]


# ───────────────────────── state-space assembly ──────────────────────────
class StateSpace(NamedTuple):
    """Row i carries the transition from row i to row i + 1 of the same series."""

    T: np.ndarray      # (n,)
    c: np.ndarray      # (n, d)
    Q: np.ndarray      # (n,)
    P0: np.ndarray     # (n,) prior variance added to Ω at a series start


class FilterResult(NamedTuple):
    loglik: float
    m_pred: np.ndarray
    P_pred: np.ndarray
    m_filt: np.ndarray
    P_filt: np.ndarray


class SmoothedStates(NamedTuple):
    mean: np.ndarray   # (n, d)
    cov: np.ndarray    # (n, d, d)


def state_space(model: SdeModel, alpha, beta) -> StateSpace:
    params = model.params(alpha, beta)
    data = model.data
    n, d = data.n, data.dim
    dt = np.r_[np.diff(data.t), 1.0]
    dt[dt <= 0] = 1.0  # only at series boundaries, never used
    if model.family == "BM":
        sigma = params["sigma"]
        return StateSpace(np.ones(n), (params["mu"] * dt)[:, None], sigma ** 2 * dt, np.zeros(n))
    a = np.column_stack([params["mu"]] if d == 1 else [params[f"mu{j + 1}"] for j in range(d)])
    tau, kappa = params["tau"], params["kappa"]
    T = np.exp(-dt / tau)
    return StateSpace(T, (1 - T)[:, None] * a, -kappa * np.expm1(-2 * dt / tau), kappa)


def _observation_cov(model: SdeModel) -> np.ndarray:
    cov = model.data.obs_cov
    if cov is None:
        raise InputError("measurement-error model needs observation covariances")
    return cov


def kalman_filter(
    y: np.ndarray,
    R: np.ndarray,
    ss: StateSpace,
    offset: int = 0,
) -> FilterResult:
    """
    Filter one series. ``y`` is (n, d), ``R`` (n, d, d); ``ss`` rows align with
    ``y``. Rows with a non-finite observation or covariance are predicted only.
    """
    n, d = y.shape
    I = np.eye(d)
    m_pred = np.zeros((n, d))
    P_pred = np.zeros((n, d, d))
    m_filt = np.zeros((n, d))
    P_filt = np.zeros((n, d, d))
    observed = np.all(np.isfinite(y), axis=1) & np.all(np.isfinite(R.reshape(n, -1)), axis=1)
    if not observed[0]:
        raise InputError(f"first observation of a series must be complete (row {offset})")

    loglik = 0.0
    m_pred[0] = y[0]
    P_pred[0] = R[0] + ss.P0[0] * I
    for i in range(n):
        if i > 0:
            m_pred[i] = ss.T[i - 1] * m_filt[i - 1] + ss.c[i - 1]
            P_pred[i] = ss.T[i - 1] ** 2 * P_filt[i - 1] + ss.Q[i - 1] * I
        if not observed[i]:
            m_filt[i], P_filt[i] = m_pred[i], P_pred[i]
            continue
        v = y[i] - m_pred[i]
        S = P_pred[i] + R[i]
        try:
            cf = linalg.cho_factor(S, lower=True)
        except linalg.LinAlgError:
            if i > 0:
                raise NumericalError("innovation covariance is not positive definite", offset + i) from None
            cf = None
        if cf is None:
            # exact first fix: anchor stays at y[0]
            K = P_pred[i] @ linalg.pinvh(S)
        else:
            if i > 0:
                logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
                loglik -= 0.5 * (d * LOG_2PI + logdet + v @ linalg.cho_solve(cf, v))
            K = linalg.cho_solve(cf, P_pred[i]).T
        A = I - K
        P = A @ P_pred[i] @ A.T + K @ R[i] @ K.T
        m_filt[i] = m_pred[i] + K @ v
        P_filt[i] = 0.5 * (P + P.T)
    return FilterResult(float(loglik), m_pred, P_pred, m_filt, P_filt)


def rts_smoother(ss: StateSpace, fr: FilterResult) -> SmoothedStates:
    n, d = fr.m_filt.shape
    mean = fr.m_filt.copy()
    cov = fr.P_filt.copy()
    for i in range(n - 2, -1, -1):
        P_next = fr.P_pred[i + 1]
        cross = ss.T[i] * fr.P_filt[i]
        try:
            G = linalg.solve(P_next, cross.T, assume_a="pos").T
        except (linalg.LinAlgError, ValueError):
            G = cross @ linalg.pinvh(P_next)
        mean[i] = fr.m_filt[i] + G @ (mean[i + 1] - fr.m_pred[i + 1])
        C = fr.P_filt[i] + G @ (cov[i + 1] - P_next) @ G.T
        cov[i] = 0.5 * (C + C.T)
    return SmoothedStates(mean, cov)


def _series_runs(model: SdeModel, alpha, beta):
    ss = state_space(model, alpha, beta)
    y = model.data.z
    R = _observation_cov(model)
    for sid, a, b in model.data.segments():
        part = StateSpace(ss.T[a:b], ss.c[a:b], ss.Q[a:b], ss.P0[a:b])
        fr = kalman_filter(y[a:b], R[a:b], part, offset=a)
        yield sid, a, b, part, fr


def kalman_nll(model: SdeModel, alpha, beta) -> float:
    """-log p(y_2..n | y_1) summed over series."""
    total = 0.0
    for _, _, _, _, fr in _series_runs(model, alpha, beta):
        total -= fr.loglik
    return total


def smooth_track(model: SdeModel, alpha, beta, series: Optional[Sequence] = None) -> SmoothedStates:
    """Smoothed state means and covariances at every observation time."""
    n, d = model.data.n, model.data.dim
    mean = np.full((n, d), np.nan)
    cov = np.full((n, d, d), np.nan)
    wanted = None if series is None else set(series)
    for sid, a, b, part, fr in _series_runs(model, alpha, beta):
        if wanted is not None and sid not in wanted:
            continue
        sm = rts_smoother(part, fr)
        mean[a:b], cov[a:b] = sm.mean, sm.cov
    if np.any(np.linalg.eigvalsh(cov[np.isfinite(cov[:, 0, 0])]) < -1e-8):
        warnings.warn("smoothed covariance lost positive semi-definiteness", NumericalWarning, stacklevel=2)
    logger.info("smoothed %d states", int(np.isfinite(mean[:, 0]).sum()))
    return SmoothedStates(mean, cov)


def smoothed_frame(model: SdeModel, states: SmoothedStates, level: float = 0.95):
    """Smoothed track as a table: time, series, mean and pointwise interval per coordinate."""
    q = norm.ppf(0.5 + level / 2)
    frame = model.data.frame[["series_id", "t"]].copy()
    for j, name in enumerate(model.data.response):
        sd = np.sqrt(np.clip(states.cov[:, j, j], 0, None))
        frame[f"{name}_mean"] = states.mean[:, j]
        frame[f"{name}_sd"] = sd
        frame[f"{name}_lower"] = states.mean[:, j] - q * sd
        frame[f"{name}_upper"] = states.mean[:, j] + q * sd
    return frame.loc[np.isfinite(states.mean[:, 0])].reset_index(drop=True)
