# utils/artifact.py
"""Fit artifacts (versioned YAML) and metadata-headed CSV tables."""

import io
import logging
import os
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
import yaml

from core.context import RunConfig
from core.errors import ArtifactError
from modules.estimate import ConvergenceInfo, FitResult
from modules.sde import SdeModel
from utils.context_utils import config_echo, config_hash, parse_run_config

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
FIT_FILE = "fit.yaml"


# ───────────────────────── fit artifact ──────────────────────────
def fit_to_dict(fit: FitResult, cfg: RunConfig) -> dict:
    x_labels, z_labels = fit.model.design.labels()
    conv = fit.convergence
    return {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash(cfg),
        "config": config_echo(cfg),
        "family": fit.model.family,
        "labels": {"alpha": x_labels, "beta": z_labels, "lambda": fit.penalty_labels},
        "alpha": fit.alpha.tolist(),
        "beta": fit.beta.tolist(),
        "lambda": fit.lam.tolist(),
        "cov": fit.cov.tolist(),
        "fixed": {int(k): float(v) for k, v in fit.fixed.items()},
        "marginal_nll": float(fit.marginal_nll),
        "convergence": {
            "converged": bool(conv.converged),
            "status": conv.status,
            "outer_iterations": int(conv.outer_iterations),
            "inner_iterations": int(conv.inner_iterations),
            "grad_norm": float(conv.grad_norm),
            "history": [float(h) for h in conv.history],
        },
    }


def write_fit(path: str, fit: FitResult, cfg: RunConfig) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(fit_to_dict(fit, cfg), f, sort_keys=False, allow_unicode=True)
    logger.info("fit artifact written to %s", path)
    return path


def read_fit(path: str) -> dict:
    if not os.path.isfile(path):
        raise ArtifactError(f"fit artifact not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ArtifactError(f"unreadable fit artifact {path}: {e}") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise ArtifactError(f"{path} is not a fit artifact")
    if doc["format_version"] != FORMAT_VERSION:
        raise ArtifactError(f"{path} has format version {doc['format_version']}, expected {FORMAT_VERSION}")
    return doc


def fit_from_dict(doc: dict, model: SdeModel) -> FitResult:
    """Rebuild a FitResult on a model built from the same config and data."""
    x_labels, z_labels = model.design.labels()
    if doc["family"] != model.family or doc["labels"]["alpha"] != x_labels or doc["labels"]["beta"] != z_labels:
        raise ArtifactError("fit artifact does not match the model built from its config and data")
    conv = ConvergenceInfo(**doc["convergence"])
    return FitResult(
        model,
        np.asarray(doc["alpha"], dtype=float),
        np.asarray(doc["beta"], dtype=float),
        np.asarray(doc["lambda"], dtype=float),
        np.asarray(doc["cov"], dtype=float).reshape(model.design.p + model.design.r, -1),
        float(doc["marginal_nll"]),
        conv,
        fixed={int(k): float(v) for k, v in (doc.get("fixed") or {}).items()},
    )


def artifact_config(doc: dict) -> RunConfig:
    return parse_run_config(doc["config"])


# ───────────────────────── tables ──────────────────────────
def write_table(path: str, frame: pd.DataFrame, meta: Optional[Dict[str, object]] = None) -> str:
    """CSV preceded by ``# key: value`` lines."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    buf = io.StringIO()
    for key, value in (meta or {}).items():
        buf.write(f"# {key}: {value}\n")
    frame.to_csv(buf, index=False, float_format="%.10g", lineterminator="\n")
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())
    return path


def read_table(path: str) -> Tuple[pd.DataFrame, Dict[str, str]]:
    if not os.path.isfile(path):
        raise ArtifactError(f"table not found: {path}")
    meta = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.startswith("# "):
                break
            key, _, value = line[2:].rstrip("\n").partition(": ")
            meta[key] = value
    return pd.read_csv(path, comment="#"), meta
