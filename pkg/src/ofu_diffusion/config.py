"""Experiment config files (JSON or TOML) validated against the bundled schema."""
from __future__ import annotations

import json
import sys
from importlib import resources

import jsonschema

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("config.schema.json").read_text())


def validate(cfg: dict) -> dict:
    jsonschema.validate(cfg, schema())
    return cfg


def load(path) -> dict:
    path = str(path)
    if path.endswith(".toml"):
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    else:
        with open(path) as fh:
            cfg = json.load(fh)
    return validate(cfg)
