# modules/commands.py
"""Sub-command handlers: each takes a validated RunConfig and returns an exit code."""

import logging
import os
from typing import Dict

import numpy as np
import pandas as pd

from core.context import RunConfig
from core.errors import EXIT_NOT_CONVERGED, EXIT_OK, ConfigError
from core.series import SERIES_COL, TIME_COL
from modules.estimate import FitResult, fit
from modules.ppc import ppc_run, template_series
from modules.sde import SdeModel, simulate, simulate_fitted
from modules.simstudy import run_study
from modules.ssm import smooth_track, smoothed_frame
from modules.uncertainty import compute_bands
from utils.artifact import FIT_FILE, artifact_config, fit_from_dict, read_fit, write_fit, write_table
from utils.context_utils import config_hash, require_seed
from utils.data_utils import load_series, summary_table

logger = logging.getLogger(__name__)


def _meta(cfg: RunConfig, command: str, **extra) -> Dict[str, object]:
    meta = {"command": command, "config_hash": config_hash(cfg)}
    if cfg.data is not None:
        meta["time_unit_seconds"] = cfg.data.time_scale
        meta["coord_unit"] = cfg.data.coord_scale
    meta.update(extra)
    return meta


def _out(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.output, name)


def _build_model(cfg: RunConfig) -> SdeModel:
    if cfg.model is None or cfg.data is None:
        raise ConfigError("this command needs 'model' and 'data' sections")
    return SdeModel.from_spec(cfg.model, load_series(cfg.data))


def load_fit(cfg: RunConfig) -> FitResult:
    """Rebuild the fitted model from the artifact's own config echo."""
    path = cfg.fit_artifact or _out(cfg, FIT_FILE)
    doc = read_fit(path)
    return fit_from_dict(doc, _build_model(artifact_config(doc)))


# ───────────────────────── fit ──────────────────────────
def cmd_fit(cfg: RunConfig) -> int:
    model = _build_model(cfg)
    result = fit(model, init=cfg.init, options=cfg.optimizer)
    write_fit(_out(cfg, FIT_FILE), result, cfg)

    meta = _meta(cfg, "fit", converged=result.convergence.converged, marginal_nll=repr(result.marginal_nll))
    write_table(_out(cfg, "estimates.csv"), result.wald_intervals(cfg.bands.level), meta)
    write_table(_out(cfg, "smoothing.csv"), result.smoothing_frame(), meta)
    if not result.convergence.converged:
        logger.error("fit did not converge (%s)", result.convergence.status)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


# ───────────────────────── simulate ──────────────────────────
def cmd_simulate(cfg: RunConfig) -> int:
    seed = require_seed(cfg, "simulate")
    sim = cfg.simulate
    seeds = np.random.SeedSequence(seed).spawn(sim.n_series)
    frames = []
    if sim.from_fit:
        result = load_fit(cfg)
        p = result.model.design.p
        for k in range(sim.n_series):
            data = simulate_fitted(result.model, result.gamma[:p], result.gamma[p:], seeds[k])
            frames.append(data.frame[[SERIES_COL, TIME_COL, *data.response]].assign(replicate=k))
    else:
        times = np.linspace(sim.start, sim.stop, sim.n)
        for k in range(sim.n_series):
            data = simulate(sim.family, times, sim.z0, seeds[k], sim.params)
            frames.append(data.frame.assign(**{SERIES_COL: k}))
    out = pd.concat(frames, ignore_index=True)
    write_table(_out(cfg, "simulated.csv"), out, _meta(cfg, "simulate", seed=seed, family=sim.family))
    return EXIT_OK


# ───────────────────────── bands ──────────────────────────
def cmd_band(cfg: RunConfig) -> int:
    seed = require_seed(cfg, "band")
    result = load_fit(cfg)
    rows = []
    for band in compute_bands(result, cfg.bands, seed):
        name = f"band_{band.target}_{band.band_type}.csv".replace("/", "_")
        excluding = band.grid[band.excludes_zero()]
        meta = _meta(cfg, "band", seed=seed, target=band.target, band_type=band.band_type,
                     level=band.level, zero_excluded=band.zero_excluded)
        write_table(_out(cfg, name), band.to_frame(), meta)
        rows.append({
            "target": band.target,
            "band_type": band.band_type,
            "level": band.level,
            "zero_excluded": band.zero_excluded,
            "n_excluding": int(excluding.size),
            "excluding_from": float(excluding.min()) if excluding.size else np.nan,
            "excluding_to": float(excluding.max()) if excluding.size else np.nan,
            "file": name,
        })
        if band.zero_excluded:
            logger.info("%s (%s): zero function excluded at %d grid points",
                        band.target, band.band_type, excluding.size)
    write_table(_out(cfg, "bands.csv"), pd.DataFrame(rows), _meta(cfg, "band", seed=seed))
    return EXIT_OK


# ───────────────────────── ppc ──────────────────────────
def cmd_ppc(cfg: RunConfig) -> int:
    seed = require_seed(cfg, "ppc")
    result = load_fit(cfg)
    pc = cfg.ppc
    report = ppc_run(
        result, pc.draws,
        template=template_series(result.model.data, pc),
        stats=pc.statistics,
        seed=seed,
        step=pc.step,
        alternative=pc.alternative,
        depth_unit=pc.depth_unit,
    )
    meta = _meta(cfg, "ppc", seed=seed, K=pc.draws, alternative=pc.alternative)
    write_table(_out(cfg, "ppc.csv"), report.to_frame(), meta)
    write_table(_out(cfg, "ppc_histograms.csv"), report.histograms(pc.bins), meta)
    return EXIT_OK


# ───────────────────────── simulation study ──────────────────────────
def cmd_simstudy(cfg: RunConfig) -> int:
    seed = require_seed(cfg, "sim-study")
    update = {"seed": seed}
    if "threads" in cfg.model_fields_set:
        update["workers"] = cfg.threads
    study = cfg.study.model_copy(update=update)
    report = run_study(study, cfg.optimizer, progress=True)
    meta = _meta(cfg, "sim-study", seed=seed, replicates=study.n_replicates)
    write_table(_out(cfg, "study_records.csv"), report.records(), meta)
    write_table(_out(cfg, "study_summary.csv"), report.summary_frame(), meta)
    write_table(_out(cfg, "study_ensemble.csv"), report.ensemble_frame(), meta)
    return EXIT_OK


# ───────────────────────── smoothed track ──────────────────────────
def cmd_smooth_track(cfg: RunConfig) -> int:
    result = load_fit(cfg)
    if not result.model.spec.measurement_error:
        raise ConfigError("smooth-track needs a model with measurement_error: true")
    p = result.model.design.p
    states = smooth_track(result.model, result.gamma[:p], result.gamma[p:])
    frame = smoothed_frame(result.model, states, cfg.bands.level)
    d = result.model.data.dim
    keep = np.isfinite(states.mean[:, 0])
    for j in range(d):
        for k in range(j, d):
            frame[f"cov_{j + 1}{k + 1}"] = states.cov[keep, j, k]
    write_table(_out(cfg, "track.csv"), frame, _meta(cfg, "smooth-track"))
    return EXIT_OK


# ───────────────────────── data summary ──────────────────────────
def cmd_summary(cfg: RunConfig) -> int:
    if cfg.data is None:
        raise ConfigError("summary needs a 'data' section")
    data = load_series(cfg.data)
    indicator = cfg.data.exposure.indicator if cfg.data.exposure else None
    table = summary_table(data, indicator)
    write_table(_out(cfg, "data_summary.csv"), table, _meta(cfg, "summary"))
    for row in table.itertuples(index=False):
        logger.info("%s", " | ".join(str(v) for v in row))
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "band": cmd_band,
    "ppc": cmd_ppc,
    "sim-study": cmd_simstudy,
    "smooth-track": cmd_smooth_track,
    "summary": cmd_summary,
}
