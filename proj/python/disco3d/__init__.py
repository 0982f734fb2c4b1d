"""Python bindings for the disco3d pipeline."""

import json

from ._core import (
    CONFIG_VERSION,
    canonical_config,
    config_hash,
    oracle_sweep,
    render_scene,
    schedule,
)
from ._core import run_pipeline as _run_pipeline

__all__ = [
    "CONFIG_VERSION",
    "canonical_config",
    "config_hash",
    "load_config",
    "oracle_sweep",
    "render_scene",
    "run_pipeline",
    "schedule",
]


def load_config(path):
    """Read, validate and return a config file as a dict with every field set."""
    with open(path) as f:
        return json.loads(canonical_config(f.read()))


def run_pipeline(config, out, until="all"):
    """Run the pipeline from a config dict, path or JSON string."""
    if isinstance(config, dict):
        text = json.dumps(config)
    elif str(config).lstrip().startswith("{"):
        text = str(config)
    else:
        with open(config) as f:
            text = f.read()
    return _run_pipeline(text, str(out), until)
