# modules/ppc.py
"""
Posterior predictive checks for dive profiles: simulate the template dives
under posterior draws, summarize each with dive statistics, and compare the
simulated distribution with the observed value.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from core.context import DIVE_STATISTICS, PpcConfig
from core.errors import DegenerateWarning, InputError
from core.series import SeriesData
from modules.estimate import FitResult
from modules.sde import simulate_fitted
from modules.uncertainty import posterior_draws

logger = logging.getLogger(__name__)

STEP_THRESHOLD = 10.0
DEEP_THRESHOLDS = (500.0, 1000.0)
MIN_REPLICATES = 20


# ───────────────────────── statistics ──────────────────────────
def dive_stats(depth: Sequence[float], step_threshold: float = STEP_THRESHOLD) -> Dict[str, float]:
    """Six summaries of a regularly sampled depth profile (metres, positive down)."""
    d = np.asarray(depth, dtype=float).ravel()
    if d.size < 3:
        raise InputError("dive statistics need at least three samples")
    if not np.all(np.isfinite(d)):
        raise InputError("non-finite depth values")
    step = np.diff(d)
    sign = np.sign(step)
    return {
        "depth_increasing": float(np.mean(step > step_threshold)),
        "depth_decreasing": float(np.mean(step < -step_threshold)),
        "max_depth": float(np.max(d)),
        "prop_deeper_500": float(np.mean(d > DEEP_THRESHOLDS[0])),
        "prop_deeper_1000": float(np.mean(d > DEEP_THRESHOLDS[1])),
        "persistence": float(np.mean((sign[1:] == sign[:-1]) & (sign[1:] != 0))),
    }


def resample_regular(t: Sequence[float], z: Sequence[float], step: float) -> np.ndarray:
    """Linear interpolation onto t0, t0 + step, ... up to the last time."""
    t = np.asarray(t, dtype=float)
    z = np.asarray(z, dtype=float).ravel()
    if step <= 0:
        raise InputError("resampling step must be positive")
    grid = np.arange(t[0], t[-1] + 1e-9 * step, step)
    return np.interp(grid, t, z)


def p_value(observed: float, simulated: np.ndarray, alternative: str = "two-sided") -> float:
    simulated = np.asarray(simulated, dtype=float)
    upper = float(np.mean(simulated >= observed))
    lower = float(np.mean(simulated <= observed))
    if alternative == "greater":
        return upper
    if alternative == "less":
        return lower
    return min(1.0, 2 * min(upper, lower))


# ───────────────────────── report ──────────────────────────
@dataclass
class PpcStatistic:
    name: str
    observed: float
    simulated: np.ndarray
    p_value: float


@dataclass
class PpcReport:
    statistics: List[PpcStatistic]
    K: int
    alternative: str = "two-sided"
    template: List = field(default_factory=list)

    def __getitem__(self, name: str) -> PpcStatistic:
        for s in self.statistics:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {
                "statistic": s.name,
                "observed": s.observed,
                "sim_mean": float(np.mean(s.simulated)),
                "sim_q025": float(np.quantile(s.simulated, 0.025)),
                "sim_q975": float(np.quantile(s.simulated, 0.975)),
                "p_value": s.p_value,
            }
            for s in self.statistics
        ])

    def histograms(self, bins: int = 30) -> pd.DataFrame:
        rows = []
        for s in self.statistics:
            lo = min(float(np.min(s.simulated)), s.observed)
            hi = max(float(np.max(s.simulated)), s.observed)
            if hi <= lo:
                hi = lo + 1.0
            counts, edges = np.histogram(s.simulated, bins=bins, range=(lo, hi))
            rows += [
                {"statistic": s.name, "bin_left": edges[j], "bin_right": edges[j + 1], "count": int(counts[j])}
                for j in range(bins)
            ]
        return pd.DataFrame(rows, columns=["statistic", "bin_left", "bin_right", "count"])


# ───────────────────────── run ──────────────────────────
def template_series(data: SeriesData, config: PpcConfig) -> List:
    """Series used as simulation templates: listed ids, or those never exposed."""
    if config.template_series:
        known = {str(s): s for s in data.series_ids}
        missing = [s for s in config.template_series if str(s) not in known]
        if missing:
            raise InputError(f"unknown template series {missing}")
        return [known[str(s)] for s in config.template_series]
    if config.baseline_column:
        flag = data.column(config.baseline_column).astype(float)
        ids = [sid for sid, a, b in data.segments() if not np.any(flag[a:b] != 0)]
        if not ids:
            raise InputError(f"no series is entirely baseline in {config.baseline_column!r}")
        return ids
    return data.series_ids


def _series_stats(data: SeriesData, stats: List[str], step: float, unit: float) -> Dict[str, float]:
    per = {s: [] for s in stats}
    t, z = data.t, data.z[:, 0] * unit
    for _, a, b in data.segments():
        if b - a < 2:
            continue
        values = dive_stats(resample_regular(t[a:b], z[a:b], step))
        for s in stats:
            per[s].append(values[s])
    if not per[stats[0]]:
        raise InputError("template series are too short for dive statistics")
    return {s: float(np.mean(v)) for s, v in per.items()}


def ppc_run(
    fit: FitResult,
    K: int,
    template: Optional[Sequence] = None,
    stats: Optional[Sequence[str]] = None,
    seed=None,
    step: float = 1.0,
    alternative: str = "two-sided",
    depth_unit: float = 1.0,
    progress: bool = False,
) -> PpcReport:
    """
    One posterior draw per simulated data set; each simulates every template
    series from its first observation and averages the statistics over them.
    ``step`` is the resampling interval in model time units; ``depth_unit``
    converts the response to metres.
    """
    stats = list(DIVE_STATISTICS if stats is None else stats)
    if not stats:
        raise InputError("no statistics requested")
    unknown = sorted(set(stats) - set(DIVE_STATISTICS))
    if unknown:
        raise InputError(f"unknown statistics {unknown}")
    if K < 1:
        raise InputError("K must be positive")
    if K < MIN_REPLICATES:
        warnings.warn(f"only {K} simulated data sets; p-values are coarse", DegenerateWarning, stacklevel=2)

    model = fit.model
    ids = model.data.series_ids if template is None else list(template)
    observed = _series_stats(model.data.subset(ids), stats, step, depth_unit)

    simulated = {s: np.empty(K) for s in stats}
    children = np.random.SeedSequence(seed).spawn(K)
    p = model.design.p
    for k in tqdm(range(K), desc="ppc", disable=not progress):
        draw_seed, sim_seed = children[k].spawn(2)
        gamma = posterior_draws(fit, 1, draw_seed)[0]
        sim = simulate_fitted(model, gamma[:p], gamma[p:], sim_seed, series=ids)
        values = _series_stats(sim, stats, step, depth_unit)
        for s in stats:
            simulated[s][k] = values[s]

    report = PpcReport(
        [PpcStatistic(s, observed[s], simulated[s], p_value(observed[s], simulated[s], alternative)) for s in stats],
        K, alternative, ids,
    )
    for s in report.statistics:
        logger.info("ppc %s: observed %.4g, p = %.3f", s.name, s.observed, s.p_value)
    return report
