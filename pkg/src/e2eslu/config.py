"""Experiment config files (YAML, validated against ``experiment.schema.json``)."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from importlib import resources
from typing import Any, Dict, List

import jsonschema
import yaml

from .errors import ConfigError

SCHEMA_NAME = "experiment.schema.json"


def schema() -> Dict[str, Any]:
    return json.loads(resources.files(__package__).joinpath(SCHEMA_NAME).read_text(encoding="utf-8"))


@dataclass
class ExperimentConfig:
    data: Dict[str, Any]
    base_dir: str = "."

    def path(self, p: str) -> str:
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(self.base_dir, p))

    @property
    def output_dir(self) -> str:
        return self.path(self.data["output_dir"])

    @property
    def seed(self) -> int:
        return int(self.data.get("seed", 0))

    @property
    def stages(self) -> List[Dict[str, Any]]:
        return self.data["stages"]

    def referenced_paths(self) -> List[str]:
        out = []
        for st in self.stages:
            out += [self.path(st["corpus"]), self.path(st["vocabulary"])]
        if self.data.get("init_checkpoint"):
            out.append(self.path(self.data["init_checkpoint"]))
        lm = self.data.get("decode", {}).get("lm")
        if lm:
            out.append(self.path(lm))
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True, allow_unicode=True)


def validate(data: Dict[str, Any], base_dir: str = ".", check_paths: bool = True) -> ExperimentConfig:
    try:
        jsonschema.validate(data, schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}") from None
    cfg = ExperimentConfig(data, base_dir)
    if check_paths:
        missing = [p for p in cfg.referenced_paths() if not os.path.exists(p)]
        if missing:
            raise ConfigError("config references missing paths: " + ", ".join(missing))
    return cfg


def load(path, check_paths: bool = True) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return validate(data, os.path.dirname(os.path.abspath(path)), check_paths)
