from .context import (
    FAMILIES, DIVE_STATISTICS, TermSpec, Formula, ModelSpec, OptimizerConfig,
    BandConfig, BandTargetConfig, PpcConfig, SimulateConfig, StudyConfig,
    DataConfig, ExposureConfig, ErrorConfig, RunConfig,
)
from .series import SeriesData

__all__ = [
    "FAMILIES", "DIVE_STATISTICS", "TermSpec", "Formula", "ModelSpec", "OptimizerConfig",
    "BandConfig", "BandTargetConfig", "PpcConfig", "SimulateConfig", "StudyConfig",
    "DataConfig", "ExposureConfig", "ErrorConfig", "RunConfig", "SeriesData",
]
