"""Run configuration: CLI flag > config file > STAINVOL_SEED (seed only) > default."""

from __future__ import annotations

import os
from pathlib import Path

from .errors import InvalidArgumentError

ENV_SEED = "STAINVOL_SEED"

# key -> (type, default)
KEYS = {
    "seed": (int, 0),
    "depth": (int, 24),
    "batch_size": (int, 64),
    "iters": (int, 500),
    "k_steps": (int, 10),
    "harvest_size": (int, 4),
    "pool_capacity": (int, 4096),
    "rescore_fraction": (float, 0.1),
    "lr": (float, 1e-3),
    "step": (float, 0.5),
    "max_iters": (int, 500),
    "tau": (float, 0.3),
    "slab_stride": (int, 12),
    "tile_stride": (int, 20),
    "optimizer": (str, "gd"),
    "patches_per_image": (int, 16),
    "jobs": (int, 1),
}


def _coerce(key, value):
    kind = KEYS[key][0]
    try:
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"config key {key!r}: cannot parse {value!r} as {kind.__name__}") from exc


def parse_config_file(path):
    """Read ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise InvalidArgumentError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve(cli_values, config_path=None, environ=None):
    """Merge settings by precedence; ``cli_values`` entries that are None are unset."""
    environ = os.environ if environ is None else environ
    cfg = {k: default for k, (_, default) in KEYS.items()}
    if environ.get(ENV_SEED, "").strip():
        cfg["seed"] = _coerce("seed", environ[ENV_SEED].strip())
    if config_path is not None:
        cfg.update(parse_config_file(config_path))
    for key, value in cli_values.items():
        if key not in KEYS:
            raise InvalidArgumentError(f"unknown setting {key!r}")
        if value is not None:
            cfg[key] = _coerce(key, value)
    return cfg
