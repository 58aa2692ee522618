"""
Helpers shared by the command groups.
"""

import json
import os
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import click
import numpy as np
from flask import current_app

from config import PipelineConfig, load_config
from database import read_json
from services.errors import EmoKgError

config_option = click.option(
    "--config", "config_path", type=click.Path(dir_okay=False),
    help="TOML config file (overrides the app's config and $EMOKG_CONFIG).",
)


def pipeline_config(config_path=None, **overrides) -> PipelineConfig:
    """The app's config, or the one at config_path, with CLI flag overrides applied."""
    try:
        config = load_config(config_path) if config_path else current_app.config["PIPELINE"]
        return config.with_overrides(**overrides)
    except EmoKgError as e:
        raise click.ClickException(str(e)) from e


def split_values(values: Iterable[str]) -> List[str]:
    """Flatten repeatable options that also accept comma-separated lists."""
    return [part.strip() for value in values for part in value.split(",") if part.strip()]


def backend_choice(value: Optional[str], option: str, endpoint_key: str,
                   names: Sequence[str] = (), name_key: Optional[str] = None) -> Tuple[Optional[str], Dict]:
    """
    Interpret a backend flag as a built-in name, an http(s) endpoint or a
    TOML config file.

    Returns:
        tuple: (config file path or None, config overrides)
    """
    if value is None:
        return None, {}
    if value in names:
        return None, {name_key: value}
    if value.startswith(("http://", "https://")):
        overrides = {endpoint_key: value}
        if name_key and "client" in names:
            overrides[name_key] = "client"
        return None, overrides
    if os.path.isfile(value):
        return value, {}
    choices = ", ".join(list(names) + ["an http(s) URL", "a TOML file"])
    raise click.BadParameter(f"expected one of {choices}; got '{value}'", param_hint=option)


def read_embedding(path: str) -> np.ndarray:
    """A JSON embedding: a bare list or an object with an 'embedding' list."""
    data = read_json(path)
    if isinstance(data, dict):
        data = data.get("embedding")
    try:
        vector = np.asarray(data if data is not None else [], dtype=np.float64)
    except (TypeError, ValueError):
        raise click.ClickException(f"{path} holds non-numeric embedding values.") from None
    if vector.ndim != 1 or vector.size == 0:
        raise click.ClickException(f"{path} does not hold a 1-d embedding.")
    return vector


def echo_json(payload) -> None:
    click.echo(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False))
