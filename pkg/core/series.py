# core/series.py
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.errors import InputError

SERIES_COL = "series_id"
TIME_COL = "t"


@dataclass(frozen=True, eq=False)
class SeriesData:
    """One or more irregular time series stacked row-wise.

    Rows of a series are contiguous and time-ordered. ``obs_cov`` holds one
    measurement-error covariance per row (shape ``(n, d, d)``); rows whose
    observation or covariance is non-finite are treated as prediction-only.
    """

    frame: pd.DataFrame
    response: List[str] = field(default_factory=lambda: ["z"])
    obs_cov: Optional[np.ndarray] = None

    def __post_init__(self):
        frame = self.frame.reset_index(drop=True)
        object.__setattr__(self, "frame", frame)
        missing = [c for c in [SERIES_COL, TIME_COL, *self.response] if c not in frame.columns]
        if missing:
            raise InputError(f"series data is missing column(s) {missing}")
        if len(frame) == 0:
            raise InputError("series data has no rows")

        t = frame[TIME_COL].to_numpy(dtype=float)
        if not np.all(np.isfinite(t)):
            raise InputError("non-finite time stamps")
        ids = frame[SERIES_COL].to_numpy()
        same = ids[1:] == ids[:-1]
        if len(pd.unique(ids)) != int(np.sum(~same)) + 1:
            raise InputError("rows of each series must be contiguous")
        bad = np.flatnonzero(same & (np.diff(t) <= 0))
        if bad.size:
            raise InputError(f"times must be strictly increasing within a series (row {bad[0] + 1})")

        if self.obs_cov is not None:
            cov = np.asarray(self.obs_cov, dtype=float)
            d = len(self.response)
            if cov.shape != (len(frame), d, d):
                raise InputError(f"obs_cov must have shape {(len(frame), d, d)}, got {cov.shape}")
            ok = np.all(np.isfinite(cov.reshape(len(frame), -1)), axis=1)
            if not np.allclose(cov[ok], np.swapaxes(cov[ok], 1, 2)):
                raise InputError("obs_cov must be symmetric")
            if ok.any():
                eig = np.linalg.eigvalsh(cov[ok])
                scale = max(1.0, float(np.abs(eig).max()))
                if eig.min() < -1e-10 * scale:
                    raise InputError("obs_cov must be positive semi-definite")
            object.__setattr__(self, "obs_cov", cov)

    # ───────────── constructors ─────────────
    @classmethod
    def from_arrays(
        cls,
        t: Sequence[float],
        z: np.ndarray,
        series: Optional[Sequence] = None,
        covariates: Optional[Dict[str, Sequence]] = None,
        obs_cov: Optional[np.ndarray] = None,
    ) -> "SeriesData":
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        response = ["z"] if z.shape[1] == 1 else [f"z{j + 1}" for j in range(z.shape[1])]
        cols = {
            SERIES_COL: np.zeros(len(z), dtype=int) if series is None else np.asarray(series),
            TIME_COL: np.asarray(t, dtype=float),
        }
        cols.update({name: z[:, j] for j, name in enumerate(response)})
        cols.update({k: np.asarray(v) for k, v in (covariates or {}).items()})
        return cls(pd.DataFrame(cols), response=response, obs_cov=obs_cov)

    # ───────────── views ─────────────
    @property
    def n(self) -> int:
        return len(self.frame)

    @property
    def dim(self) -> int:
        return len(self.response)

    @property
    def t(self) -> np.ndarray:
        return self.frame[TIME_COL].to_numpy(dtype=float)

    @property
    def z(self) -> np.ndarray:
        return self.frame[self.response].to_numpy(dtype=float)

    @property
    def series(self) -> np.ndarray:
        return self.frame[SERIES_COL].to_numpy()

    @property
    def series_ids(self) -> List:
        return list(pd.unique(self.series))

    def column(self, name: str) -> np.ndarray:
        if name not in self.frame.columns:
            raise InputError(f"unknown column {name!r}")
        return self.frame[name].to_numpy()

    def segments(self) -> List[Tuple[object, int, int]]:
        """(series id, start, stop) per series, stop exclusive."""
        ids = self.series
        starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
        stops = np.r_[starts[1:], len(ids)]
        return [(ids[a], int(a), int(b)) for a, b in zip(starts, stops)]

    def pair_index(self) -> np.ndarray:
        """Rows i whose successor i + 1 belongs to the same series."""
        ids = self.series
        return np.flatnonzero(ids[1:] == ids[:-1])

    # ───────────── derived copies ─────────────
    def subset(self, series_ids: Iterable) -> "SeriesData":
        keep = np.isin(self.series, list(series_ids))
        if not keep.any():
            raise InputError("subset selects no rows")
        cov = None if self.obs_cov is None else self.obs_cov[keep]
        return replace(self, frame=self.frame.loc[keep], obs_cov=cov)

    def with_response(self, z: np.ndarray) -> "SeriesData":
        frame = self.frame.copy()
        frame[self.response] = np.asarray(z, dtype=float).reshape(self.n, self.dim)
        return replace(self, frame=frame)

    def with_columns(self, **columns) -> "SeriesData":
        return replace(self, frame=self.frame.assign(**columns))
