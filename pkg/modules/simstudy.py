# modules/simstudy.py
"""
Simulation study: eight baseline Brownian-motion series plus one that switches
to a response diffusion law part-way through, refitted many times to measure
function recovery and simultaneous-band coverage of the difference smooth.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt
from tqdm import tqdm

from core.context import Formula, ModelSpec, OptimizerConfig, StudyConfig, TermSpec
from core.errors import ConvergenceError, InputError, NumericalError, SdeError
from core.series import SeriesData
from modules.basis import term_matrix
from modules.estimate import fit
from modules.sde import SdeModel, simulate
from modules.uncertainty import BandTarget, posterior_draws, simultaneous_band

logger = logging.getLogger(__name__)

COVARIATE = "diveprop"
INDICATOR = "expo"
SWITCHING = "switching"
BASELINE_TERMS = ["sigma:(Intercept)", f"sigma:s({COVARIATE})"]
DIFFERENCE_TERMS = [f"sigma:{INDICATOR}", f"sigma:s({COVARIATE}):{INDICATOR}"]
ENSEMBLE_QUANTILES = (0.025, 0.1, 0.9, 0.975)
INIT_JITTER = (1.0, 1.5, 0.6, 2.0, 0.4)


# ───────────────────────── truth ──────────────────────────
def gen_truth(x, phase: str = "baseline"):
    """Diffusion σ(x): baseline 0.5 - 1.5(x - 0.5)², response 0.05 + 5(x - 0.5)²."""
    x = np.asarray(x, dtype=float)
    if np.any((x < 0) | (x > 1)) or not np.all(np.isfinite(x)):
        raise InputError("x must lie in [0, 1]")
    if phase == "baseline":
        return 0.5 - 1.5 * (x - 0.5) ** 2
    if phase == "response":
        return 0.05 + 5 * (x - 0.5) ** 2
    raise InputError(f"unknown phase {phase!r}")


def true_difference(x):
    return np.log(gen_truth(x, "response")) - np.log(gen_truth(x, "baseline"))


# ───────────────────────── data ──────────────────────────
def _seed_sequence(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def gen_replicate(config: StudyConfig, seed=None) -> SeriesData:
    """
    One data set: ``n_series - n_switching`` baseline series, then the switching
    ones. Times are sorted uniform draws, independently per series; x = elapsed
    proportion of the time span. Switching series follow the response law from
    the first time with x ≥ threshold.
    """
    t0, t1 = config.t_span
    children = _seed_sequence(seed).spawn(config.n_series)
    frames = []
    for s in range(config.n_series):
        rng = np.random.default_rng(children[s])
        t = np.sort(rng.uniform(t0, t1, config.n_obs))
        x = (t - t0) / (t1 - t0)
        switching = s >= config.n_series - config.n_switching
        expo = (x >= config.switch_threshold) & switching & (not config.force_baseline)
        sigma = np.where(expo, gen_truth(x, "response"), gen_truth(x, "baseline"))
        path = simulate("BM", t, 0.0, rng, {"mu": 0.0, "sigma": sigma})
        frames.append(path.frame.assign(
            series_id=s,
            **{COVARIATE: x, INDICATOR: expo.astype(float), SWITCHING: float(switching)},
        ))
    return SeriesData(pd.concat(frames, ignore_index=True))


def study_spec(config: StudyConfig) -> ModelSpec:
    """Zero-drift BM; log σ = intercept + expo + s(x) + s(x):expo, both smooths with shrinkage."""
    k = config.basis_dim
    sigma = Formula(parameter="sigma", terms=[
        TermSpec(kind="intercept"),
        TermSpec(kind="linear", covariate=INDICATOR),
        TermSpec(kind="spline", covariate=COVARIATE, basis_dim=k, shrinkage=True),
        TermSpec(kind="spline", covariate=COVARIATE, by=INDICATOR, basis_dim=k, shrinkage=True),
    ])
    return ModelSpec(family="BM", formulas=[Formula(parameter="mu"), sigma])


# ───────────────────────── one replicate ──────────────────────────
@dataclass
class ReplicateResult:
    index: int
    ok: bool
    attempts: int = 0
    covered: Optional[bool] = None
    rmse_baseline: float = np.nan
    rmse_difference: float = np.nan
    marginal_nll: float = np.nan
    message: str = ""
    baseline_curve: Optional[np.ndarray] = None
    difference_curve: Optional[np.ndarray] = None

    def record(self) -> Dict:
        return {
            "replicate": self.index,
            "ok": self.ok,
            "attempts": self.attempts,
            "covered": self.covered,
            "rmse_baseline": self.rmse_baseline,
            "rmse_difference": self.rmse_difference,
            "marginal_nll": self.marginal_nll,
            "message": self.message,
        }


def _grids(config: StudyConfig):
    lo, hi = config.rmse_range
    return (np.linspace(lo, hi, config.grid_size),
            np.linspace(config.switch_threshold, 1.0, config.grid_size))


def fit_replicate(config: StudyConfig, data: SeriesData, options: Optional[OptimizerConfig] = None):
    """Fit with up to ``fit_attempts`` tries, scaling the σ start value between tries."""
    model = SdeModel.from_spec(study_spec(config), data)
    attempts = 0
    for attempt in Retrying(
        reraise=True,
        stop=stop_after_attempt(config.fit_attempts),
        retry=retry_if_exception_type((ConvergenceError, NumericalError)),
    ):
        with attempt:
            attempts = attempt.retry_state.attempt_number
            jitter = INIT_JITTER[(attempts - 1) % len(INIT_JITTER)]
            result = fit(model, init={"sigma": config.sigma_init * jitter}, options=options,
                         fixed={"mu": 0.0})
            if not result.convergence.converged:
                raise ConvergenceError(f"outer optimizer stopped: {result.convergence.status}")
    return result, attempts


def _run_replicate(config: StudyConfig, index: int, seed, options: Optional[OptimizerConfig]) -> ReplicateResult:
    data_seed, band_seed = _seed_sequence(seed).spawn(2)
    try:
        data = gen_replicate(config, data_seed)
        result, attempts = fit_replicate(config, data, options)
    except SdeError as e:
        logger.warning("replicate %d failed: %s", index, e)
        return ReplicateResult(index, False, config.fit_attempts, message=str(e))

    x_base, x_diff = _grids(config)
    design = result.model.design
    base = term_matrix(design, BASELINE_TERMS, {COVARIATE: x_base}) @ result.gamma
    diff = term_matrix(design, DIFFERENCE_TERMS, {COVARIATE: x_diff, INDICATOR: 1.0}) @ result.gamma

    draws = posterior_draws(result, config.draws, band_seed)
    band = simultaneous_band(result, BandTarget(COVARIATE, terms=DIFFERENCE_TERMS, fixed={INDICATOR: 1.0}),
                             x_diff, config.level, draws=draws)
    truth_base = np.log(gen_truth(x_base, "baseline"))
    truth_diff = true_difference(x_diff)
    return ReplicateResult(
        index, True, attempts,
        covered=band.contains(truth_diff),
        rmse_baseline=float(np.sqrt(np.mean((base - truth_base) ** 2))),
        rmse_difference=float(np.sqrt(np.mean((diff - truth_diff) ** 2))),
        marginal_nll=result.marginal_nll,
        baseline_curve=base,
        difference_curve=diff,
    )


# ───────────────────────── study ──────────────────────────
@dataclass
class StudyReport:
    config: StudyConfig
    replicates: List[ReplicateResult]
    baseline_grid: np.ndarray
    difference_grid: np.ndarray
    summary: Dict[str, float] = field(default_factory=dict)

    def records(self) -> pd.DataFrame:
        return pd.DataFrame([r.record() for r in self.replicates])

    @property
    def successes(self) -> List[ReplicateResult]:
        return [r for r in self.replicates if r.ok]

    def curves(self, which: str = "difference") -> np.ndarray:
        attr = "difference_curve" if which == "difference" else "baseline_curve"
        ok = self.successes
        if not ok:
            return np.zeros((0, self.config.grid_size))
        return np.vstack([getattr(r, attr) for r in ok])

    def ensemble_frame(self, n_curves: int = 50, quantiles: Sequence[float] = ENSEMBLE_QUANTILES) -> pd.DataFrame:
        """First ``n_curves`` fitted smooths plus pointwise quantiles over all of them, long format."""
        frames = []
        for which, grid in (("baseline", self.baseline_grid), ("difference", self.difference_grid)):
            curves = self.curves(which)
            if curves.shape[0] == 0:
                continue
            for j, curve in enumerate(curves[:n_curves]):
                frames.append(pd.DataFrame({"smooth": which, "series": f"fit{j}", "x": grid, "value": curve}))
            for q in quantiles:
                frames.append(pd.DataFrame({"smooth": which, "series": f"q{q:g}", "x": grid,
                                            "value": np.quantile(curves, q, axis=0)}))
            truth = np.log(gen_truth(grid, "baseline")) if which == "baseline" else true_difference(grid)
            frames.append(pd.DataFrame({"smooth": which, "series": "truth", "x": grid, "value": truth}))
        if not frames:
            return pd.DataFrame(columns=["smooth", "series", "x", "value"])
        return pd.concat(frames, ignore_index=True)

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{"metric": k, "value": v} for k, v in self.summary.items()])


def _summarize(config: StudyConfig, results: List[ReplicateResult]) -> Dict[str, float]:
    ok = [r for r in results if r.ok]
    covered = np.array([r.covered for r in ok], dtype=float)
    return {
        "replicates": float(len(results)),
        "succeeded": float(len(ok)),
        "failed": float(len(results) - len(ok)),
        "coverage": float(covered.mean()) if ok else np.nan,
        "median_rmse_baseline": float(np.median([r.rmse_baseline for r in ok])) if ok else np.nan,
        "median_rmse_difference": float(np.median([r.rmse_difference for r in ok])) if ok else np.nan,
        "level": config.level,
    }


def run_study(
    config: StudyConfig,
    options: Optional[OptimizerConfig] = None,
    progress: bool = False,
) -> StudyReport:
    """Replicates seeded from SeedSequence(config.seed); results are independent of ``workers``."""
    R = config.n_replicates
    seeds = np.random.SeedSequence(config.seed).spawn(R)
    logger.info("simulation study: %d replicates, %d worker(s)", R, config.workers)

    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(_run_replicate, config, i, seeds[i], options) for i in range(R)]
            results = [f.result() for f in tqdm(futures, desc="replicates", disable=not progress)]
    else:
        results = [_run_replicate(config, i, seeds[i], options)
                   for i in tqdm(range(R), desc="replicates", disable=not progress)]

    x_base, x_diff = _grids(config)
    report = StudyReport(config, results, x_base, x_diff, _summarize(config, results))
    logger.info("coverage %.3f over %d successful replicates (%d failed)",
                report.summary["coverage"], int(report.summary["succeeded"]), int(report.summary["failed"]))
    return report
