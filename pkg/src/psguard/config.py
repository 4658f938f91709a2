"""Run configuration: TOML files with PSGUARD_-prefixed environment overrides.

Every key lives in a section; PSGUARD_<SECTION>_<KEY>=<value> overrides it.
Values are parsed as JSON where possible (numbers, booleans, lists) and fall
back to plain strings. The merged configuration is serialized verbatim into
every run report.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib  # Python 3.11+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .embedding import EmbeddingConfig
from .models import ArchitectureSpec, TrainConfig

ENV_PREFIX = "PSGUARD_"

SECTIONS = ("run", "preprocess", "dedup", "embedding", "model", "train", "eval")

DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {"seed": 1, "out_dir": "runs/latest"},
    "preprocess": {},
    "dedup": {"threshold": 100, "strict": True},
    "embedding": {},
    "model": {"kind": "token_char", "embed_init": "inline_uniform"},
    "train": {},
    "eval": {"budget": 1e-3, "folds": 3, "boundary": None},
}


class ConfigError(Exception):
    pass


def _parse_env_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_config(path: Optional[str | Path] = None, environ: Optional[dict] = None) -> "RunConfig":
    """Defaults, then the TOML file, then PSGUARD_ environment overrides."""
    merged = {s: dict(v) for s, v in DEFAULTS.items()}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                parsed = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}")
        for section, values in parsed.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section: [{section}]")
            merged[section].update(values)
    environ = os.environ if environ is None else environ
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX) :].lower()
        for section in SECTIONS:
            if rest.startswith(section + "_"):
                merged[section][rest[len(section) + 1 :]] = _parse_env_value(raw)
                break
        else:
            raise ConfigError(f"environment override names no known section: {key}")
    return RunConfig(merged)


class RunConfig:
    """Typed access over the merged section/key table."""

    def __init__(self, sections: dict[str, dict[str, Any]]):
        self.sections = sections

    def snapshot(self) -> dict:
        return json.loads(json.dumps(self.sections))

    @property
    def seed(self) -> int:
        return int(self.sections["run"]["seed"])

    @property
    def out_dir(self) -> str:
        return str(self.sections["run"]["out_dir"])

    def embedding_config(self, **overrides) -> EmbeddingConfig:
        values = {**self.sections["embedding"], **overrides}
        values.setdefault("seed", self.seed)
        try:
            return EmbeddingConfig(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad [embedding] config: {exc}")

    def train_config(self, **overrides) -> TrainConfig:
        values = {**self.sections["train"], **overrides}
        values.setdefault("seed", self.seed)
        try:
            return TrainConfig(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad [train] config: {exc}")

    def architecture(self, **overrides) -> ArchitectureSpec:
        model = {**self.sections["model"], **overrides}
        kind = model.pop("kind")
        embed_init = model.pop("embed_init", "inline_uniform")
        pre = self.sections["preprocess"]
        try:
            spec = ArchitectureSpec.for_kind(kind, embed_init=embed_init)
            lengths = {}
            if "token_input_len" in pre and spec.uses_tokens:
                lengths["token_input_len"] = int(pre["token_input_len"])
            if "char_input_len" in pre and spec.uses_chars:
                lengths["char_input_len"] = int(pre["char_input_len"])
            if lengths or model:
                spec = ArchitectureSpec(**{**spec.__dict__, **lengths, **model})
            return spec
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad [model]/[preprocess] config: {exc}")

    @property
    def dedup_threshold(self) -> int:
        return int(self.sections["dedup"]["threshold"])

    @property
    def dedup_strict(self) -> bool:
        return bool(self.sections["dedup"]["strict"])

    @property
    def fpr_budget(self) -> float:
        return float(self.sections["eval"]["budget"])

    @property
    def folds(self) -> int:
        return int(self.sections["eval"]["folds"])

    @property
    def boundary(self) -> Optional[str]:
        return self.sections["eval"].get("boundary")
