# utils/data_utils.py
"""
CSV ingestion: column bindings, time conversion, unit scaling, exposure
indicators and measurement-error covariances.
"""

import logging
import os
from typing import Dict, Optional

import numpy as np
import pandas as pd

from core.context import DataConfig, ExposureConfig
from core.errors import InputError
from core.series import SERIES_COL, TIME_COL, SeriesData
from modules.ssm import ellipses_to_cov, goniometer_cov

logger = logging.getLogger(__name__)

RAW_TIME_COL = "t_raw"
ANIMAL_COL = "animal"


def _read_csv(path: str) -> pd.DataFrame:
    if not os.path.isfile(path):
        raise InputError(f"data file not found: {path}")
    try:
        return pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise InputError(f"cannot read {path}: {e}") from None


def to_seconds(values: pd.Series) -> np.ndarray:
    """Numeric times pass through as seconds; anything else is parsed as ISO-8601."""
    if pd.api.types.is_numeric_dtype(values):
        return values.to_numpy(dtype=float)
    try:
        stamps = pd.to_datetime(values, utc=True, format="ISO8601")
    except (ValueError, TypeError) as e:
        raise InputError(f"unparseable time stamps: {e}") from None
    if stamps.isna().any():
        raise InputError(f"missing time stamp at row {int(np.flatnonzero(stamps.isna())[0])}")
    return (stamps - pd.Timestamp(0, tz="UTC")).dt.total_seconds().to_numpy()


def _exposure_starts(exposure: ExposureConfig) -> Dict[str, float]:
    starts = {}
    for key, value in exposure.starts.items():
        if isinstance(value, (int, float)):
            starts[str(key)] = float(value)
        else:
            starts[str(key)] = float(to_seconds(pd.Series([value]))[0])
    return starts


def _observation_cov(frame: pd.DataFrame, cfg: DataConfig, observed: np.ndarray) -> Optional[np.ndarray]:
    err = cfg.error
    if err is None:
        return None
    n = len(frame)
    sources = []
    if err.semi_major or err.semi_minor or err.orientation:
        if not (err.semi_major and err.semi_minor and err.orientation):
            raise InputError("ellipse errors need semi_major, semi_minor and orientation columns")
        M, m, o = (frame[c].to_numpy(dtype=float) for c in (err.semi_major, err.semi_minor, err.orientation))
        has = np.isfinite(M) & np.isfinite(m) & np.isfinite(o)
        sources.append((has, lambda rows: ellipses_to_cov(M[rows], m[rows], o[rows])))
    if err.signal_db:
        s = frame[err.signal_db].to_numpy(dtype=float)
        sources.append((np.isfinite(s), lambda rows: goniometer_cov(s[rows])))
    if err.cov:
        xx, xy, yy = (frame[c].to_numpy(dtype=float) for c in err.cov)
        has = np.isfinite(xx) & np.isfinite(xy) & np.isfinite(yy)
        sources.append((has, lambda rows: np.stack([np.stack([xx[rows], xy[rows]], -1),
                                                    np.stack([xy[rows], yy[rows]], -1)], -2)))
    if not sources:
        raise InputError("error section names no columns")

    count = sum(has.astype(int) for has, _ in sources)
    bad = np.flatnonzero((count > 1) | ((count == 0) & observed))
    if bad.size:
        raise InputError(f"row {int(bad[0])} must carry exactly one error source (has {int(count[bad[0]])})")

    cov = np.full((n, 2, 2), np.nan)
    for has, build in sources:
        rows = np.flatnonzero(has)
        if rows.size:
            cov[rows] = build(rows)
    return cov / cfg.coord_scale ** 2


def load_series(cfg: DataConfig) -> SeriesData:
    """Read, sort and convert a CSV file into model units."""
    raw = _read_csv(cfg.path)
    needed = [cfg.time, cfg.series, *cfg.response, *cfg.covariates]
    if cfg.animal:
        needed.append(cfg.animal)
    missing = [c for c in needed if c not in raw.columns]
    if missing:
        raise InputError(f"{cfg.path} is missing column(s) {missing}")
    if len(cfg.response) > 2:
        raise InputError("at most two response columns are supported")

    frame = raw.copy()
    frame[RAW_TIME_COL] = to_seconds(raw[cfg.time])
    frame[SERIES_COL] = raw[cfg.series].astype(str)
    order = {sid: k for k, sid in enumerate(pd.unique(frame[SERIES_COL]))}
    frame = frame.assign(_order=frame[SERIES_COL].map(order)) \
        .sort_values(["_order", RAW_TIME_COL], kind="stable").drop(columns="_order").reset_index(drop=True)

    first = frame.groupby(SERIES_COL, sort=False)[RAW_TIME_COL].transform("min")
    last = frame.groupby(SERIES_COL, sort=False)[RAW_TIME_COL].transform("max")
    frame[TIME_COL] = (frame[RAW_TIME_COL] - first) / cfg.time_scale
    if cfg.animal:
        frame[ANIMAL_COL] = frame[cfg.animal].astype(str)

    response = ["z"] if len(cfg.response) == 1 else ["z1", "z2"]
    for name, col in zip(response, cfg.response):
        frame[name] = frame[col].astype(float) / cfg.coord_scale

    if cfg.proportion_column:
        span = (last - first).replace(0, np.nan)
        frame[cfg.proportion_column] = ((frame[RAW_TIME_COL] - first) / span).fillna(0.0)

    if cfg.exposure is not None:
        exp = cfg.exposure
        key_col = ANIMAL_COL if exp.level == "animal" else SERIES_COL
        if key_col not in frame.columns:
            raise InputError("animal-level exposure needs an animal column")
        starts = frame[key_col].map(_exposure_starts(exp)).to_numpy(dtype=float)
        after = np.isfinite(starts) & (frame[RAW_TIME_COL].to_numpy() >= np.nan_to_num(starts, nan=np.inf))
        frame[exp.indicator] = after.astype(float)
        frame[exp.since] = np.where(after, (frame[RAW_TIME_COL].to_numpy() - np.nan_to_num(starts)) / cfg.time_scale, 0.0)

    observed = np.all(np.isfinite(frame[response].to_numpy(dtype=float)), axis=1)
    obs_cov = _observation_cov(frame, cfg, observed)
    if obs_cov is not None and len(response) != 2:
        raise InputError("measurement-error covariances need two response columns")

    data = SeriesData(frame, response=response, obs_cov=obs_cov)
    logger.info("loaded %s: %d rows, %d series", cfg.path, data.n, len(data.series_ids))
    return data


def summary_table(data: SeriesData, exposure_indicator: Optional[str] = None) -> pd.DataFrame:
    """Per animal (or per series when no animal column): observations, series count, exposure."""
    frame = data.frame
    key = ANIMAL_COL if ANIMAL_COL in frame.columns else SERIES_COL
    grouped = frame.groupby(key, sort=False)
    table = pd.DataFrame({
        "n_obs": grouped.size(),
        "n_dives": grouped[SERIES_COL].nunique(),
    })
    if exposure_indicator and exposure_indicator in frame.columns:
        table["exposed"] = grouped[exposure_indicator].max().astype(bool)
    table.index.name = key
    return table.reset_index()
