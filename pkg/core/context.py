# core/context.py
from typing import Optional, List, Dict, Tuple, Literal, Union
from pydantic import BaseModel, Field, field_validator, model_validator

# ───────────── SDE families: (parameter, link) in linear-predictor order ─────────────
FAMILIES: Dict[str, Tuple[Tuple[str, str], ...]] = {
    "BM": (("mu", "identity"), ("sigma", "log")),
    "OU1": (("mu", "identity"), ("tau", "log"), ("kappa", "log")),
    "OU2": (("mu1", "identity"), ("mu2", "identity"), ("tau", "log"), ("kappa", "log")),
}

DIVE_STATISTICS = [
    "depth_increasing",
    "depth_decreasing",
    "max_depth",
    "prop_deeper_500",
    "prop_deeper_1000",
    "persistence",
]


class TermSpec(BaseModel):
    kind: Literal["intercept", "linear", "spline", "random_intercept"]
    covariate: Optional[str] = None
    basis_dim: int = 10
    by: Optional[str] = None
    by_group: Optional[str] = None  # one smooth per level of this factor (active rows only)
    penalty_order: int = 2
    shrinkage: bool = False
    centred: bool = True

    @model_validator(mode="after")
    def _check_kind(self) -> "TermSpec":
        if self.kind != "intercept" and not self.covariate:
            raise ValueError(f"{self.kind} term needs a covariate")
        if self.kind == "spline" and self.basis_dim < 3:
            raise ValueError("spline basis_dim must be at least 3")
        if self.by_group and self.kind != "spline":
            raise ValueError("by_group is only defined for spline terms")
        if self.kind == "random_intercept" and self.by:
            raise ValueError("random intercepts do not take a by-variable")
        return self

    def label(self) -> str:
        if self.kind == "intercept":
            return "(Intercept)"
        if self.kind == "random_intercept":
            return f"re({self.covariate})"
        base = f"s({self.covariate})" if self.kind == "spline" else str(self.covariate)
        return f"{base}:{self.by}" if self.by else base


class Formula(BaseModel):
    parameter: str
    terms: List[TermSpec] = Field(default_factory=lambda: [TermSpec(kind="intercept")])

    @field_validator("terms")
    @classmethod
    def _one_intercept(cls, terms: List[TermSpec]) -> List[TermSpec]:
        if sum(t.kind == "intercept" for t in terms) > 1:
            raise ValueError("at most one intercept term per formula")
        return terms


class ModelSpec(BaseModel):
    family: Literal["BM", "OU1", "OU2"]
    formulas: List[Formula] = Field(default_factory=list)
    measurement_error: bool = False
    exposure_column: Optional[str] = None

    @model_validator(mode="after")
    def _check_parameters(self) -> "ModelSpec":
        known = [p for p, _ in FAMILIES[self.family]]
        seen = [f.parameter for f in self.formulas]
        unknown = sorted(set(seen) - set(known))
        if unknown:
            raise ValueError(f"{self.family} has no parameter(s) {unknown}; expected {known}")
        if len(seen) != len(set(seen)):
            raise ValueError("one formula per parameter")
        return self

    @property
    def parameters(self) -> List[str]:
        return [p for p, _ in FAMILIES[self.family]]

    @property
    def links(self) -> Dict[str, str]:
        return dict(FAMILIES[self.family])

    @property
    def dim(self) -> int:
        return 2 if self.family == "OU2" else 1

    def formula_for(self, parameter: str) -> Formula:
        for f in self.formulas:
            if f.parameter == parameter:
                return f
        return Formula(parameter=parameter)


# ───────────── run-time sections ─────────────
class OptimizerConfig(BaseModel):
    outer_tol: float = 1e-4
    inner_tol: float = 1e-8
    max_outer: int = 200
    max_inner: int = 100
    fd_step: float = 1e-5
    damping_start: float = 1e-6
    lambda_init: float = 1.0


class BandTargetConfig(BaseModel):
    name: str
    covariate: str
    terms: Optional[List[str]] = None
    parameter: Optional[str] = None
    band_type: Literal["pointwise", "simultaneous", "both"] = "simultaneous"
    grid_range: Optional[Tuple[float, float]] = None
    fixed: Dict[str, Union[float, str]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _one_target(self) -> "BandTargetConfig":
        if (self.terms is None) == (self.parameter is None):
            raise ValueError(f"band target {self.name!r}: give exactly one of terms / parameter")
        return self


class BandConfig(BaseModel):
    level: float = Field(0.95, gt=0, lt=1)
    draws: int = Field(1000, ge=2)
    grid_size: int = Field(100, ge=2)
    targets: List[BandTargetConfig] = Field(default_factory=list)


class PpcConfig(BaseModel):
    draws: int = Field(1000, ge=1)
    template_series: Optional[List[str]] = None
    baseline_column: Optional[str] = None
    statistics: List[str] = Field(default_factory=lambda: list(DIVE_STATISTICS))
    alternative: Literal["two-sided", "greater", "less"] = "two-sided"
    step: float = Field(1.0, gt=0)  # resampling interval, model time units
    depth_unit: float = Field(1.0, gt=0)  # metres per response unit
    bins: int = Field(30, ge=1)

    @field_validator("statistics")
    @classmethod
    def _known_statistics(cls, stats: List[str]) -> List[str]:
        unknown = sorted(set(stats) - set(DIVE_STATISTICS))
        if unknown:
            raise ValueError(f"unknown statistics {unknown}")
        return stats


class SimulateConfig(BaseModel):
    family: Literal["BM", "OU1", "OU2"] = "BM"
    params: Dict[str, float] = Field(default_factory=lambda: {"mu": 0.0, "sigma": 1.0})
    start: float = 0.0
    stop: float = 100.0
    n: int = Field(101, ge=2)
    z0: List[float] = Field(default_factory=lambda: [0.0])
    n_series: int = Field(1, ge=1)
    from_fit: bool = False


class StudyConfig(BaseModel):
    replicates: int = Field(200, ge=1)
    full_scale: bool = False
    n_series: int = Field(9, ge=2)
    n_switching: int = Field(1, ge=1)
    n_obs: int = Field(200, ge=10)
    t_span: Tuple[float, float] = (0.0, 10.0)
    switch_threshold: float = Field(0.25, ge=0, le=1)
    basis_dim: int = Field(10, ge=4)
    level: float = Field(0.95, gt=0, lt=1)
    draws: int = Field(1000, ge=2)
    grid_size: int = Field(100, ge=2)
    rmse_range: Tuple[float, float] = (0.05, 0.95)
    sigma_init: float = 0.3
    seed: int = 1
    workers: int = 1
    fit_attempts: int = Field(3, ge=1)
    force_baseline: bool = False

    @model_validator(mode="after")
    def _check_design(self) -> "StudyConfig":
        if self.n_switching >= self.n_series:
            raise ValueError("at least one baseline series is required")
        lo, hi = self.rmse_range
        if not 0 <= lo < hi <= 1:
            raise ValueError("rmse_range must lie in [0, 1]")
        if self.t_span[1] <= self.t_span[0]:
            raise ValueError("t_span must be increasing")
        return self

    @property
    def n_replicates(self) -> int:
        return 2000 if self.full_scale else self.replicates


class ExposureConfig(BaseModel):
    starts: Dict[str, Union[float, str]]
    level: Literal["series", "animal"] = "series"
    indicator: str = "expo"
    since: str = "t_expo"


class ErrorConfig(BaseModel):
    semi_major: Optional[str] = None
    semi_minor: Optional[str] = None
    orientation: Optional[str] = None
    signal_db: Optional[str] = None
    cov: Optional[Tuple[str, str, str]] = None  # (xx, xy, yy) columns


class DataConfig(BaseModel):
    path: str
    time: str = "t"
    series: str = "ID"
    response: List[str] = Field(default_factory=lambda: ["z"])
    covariates: List[str] = Field(default_factory=list)
    animal: Optional[str] = None
    time_scale: float = Field(1.0, gt=0)  # seconds per model time unit
    coord_scale: float = Field(1.0, gt=0)  # input units per model unit
    proportion_column: Optional[str] = None
    exposure: Optional[ExposureConfig] = None
    error: Optional[ErrorConfig] = None


class RunConfig(BaseModel):
    model: Optional[ModelSpec] = None
    data: Optional[DataConfig] = None
    init: Dict[str, float] = Field(default_factory=dict)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    bands: BandConfig = Field(default_factory=BandConfig)
    ppc: PpcConfig = Field(default_factory=PpcConfig)
    simulate: SimulateConfig = Field(default_factory=SimulateConfig)
    study: StudyConfig = Field(default_factory=StudyConfig)
    seed: Optional[int] = None
    output: str = "out"
    threads: int = Field(1, ge=1)
    fit_artifact: Optional[str] = None
