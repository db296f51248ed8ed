# utils/context_utils.py
import hashlib
import json
import os
from typing import Optional

import yaml
from pydantic import ValidationError

from core.context import RunConfig
from core.errors import ConfigError

DEFAULT_CONFIG = os.path.join("config", "settings.yaml")


def parse_run_config(raw: Optional[dict]) -> RunConfig:
    """Validate a raw YAML mapping into a RunConfig; schema errors become ConfigError."""
    try:
        return RunConfig(**(raw or {}))
    except ValidationError as e:
        raise ConfigError(f"invalid configuration:\n{e}") from None


def load_config(path: str = DEFAULT_CONFIG) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path} is not valid YAML: {e}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a mapping at the top level")
    cfg = parse_run_config(raw)
    # data paths are relative to the config file
    if cfg.data is not None and not os.path.isabs(cfg.data.path):
        cfg.data.path = os.path.normpath(os.path.join(os.path.dirname(os.path.abspath(path)), cfg.data.path))
    return cfg


def apply_overrides(
    cfg: RunConfig,
    seed: Optional[int] = None,
    out: Optional[str] = None,
    threads: Optional[int] = None,
) -> RunConfig:
    update = {}
    if seed is not None:
        update["seed"] = seed
    if out is not None:
        update["output"] = out
    if threads is not None:
        if threads < 1:
            raise ConfigError("--threads must be at least 1")
        update["threads"] = threads
    return cfg.model_copy(update=update)


def config_echo(cfg: RunConfig) -> dict:
    return cfg.model_dump(mode="json")


def config_hash(cfg: RunConfig) -> str:
    """First 16 hex digits of SHA-256 over the canonical JSON of the config, output directory excluded."""
    echo = {k: v for k, v in config_echo(cfg).items() if k != "output"}
    canonical = json.dumps(echo, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def require_seed(cfg: RunConfig, command: str) -> int:
    if cfg.seed is None:
        raise ConfigError(f"'{command}' is stochastic: set seed in the config or pass --seed")
    return cfg.seed
