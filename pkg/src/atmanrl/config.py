"""Run configuration: a flat ``section.key = value`` text format over dataclasses.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored. Keys are
``model.*``, ``sft.*``, ``rl.*``, ``mask.*`` or one of the top-level fields of
:class:`RunConfig`. Unknown keys are an error. Values are parsed to the type of the
field's default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .grpo import RLConfig
from .mask import MaskOptConfig
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SFTConfig:
    """Supervised warm start on gold CoTs before RL."""
    steps: int = 5000
    lr: float = 3e-3
    batch_size: int = 32
    weight_decay: float = 0.0
    corpus_size: int = 6000
    n_steps: int = 3
    n_distractors: int = 5
    vary_distractors: bool = True
    counterfactual_frac: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 1
    init_checkpoint: str = ""
    eval_k: int = 4
    model: ModelConfig = field(default_factory=ModelConfig)
    sft: SFTConfig = field(default_factory=SFTConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    mask: MaskOptConfig = field(default_factory=MaskOptConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return dump(self)


SECTIONS = ("model", "sft", "rl", "mask")


def _parse_value(raw: str, default: Any, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {type(default).__name__})")
    return raw


def _defaults(obj) -> dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def apply(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Return ``cfg`` with dotted-key overrides; string values are parsed."""
    top: dict[str, Any] = {}
    sect: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    for key, value in overrides.items():
        section, _, name = key.rpartition(".")
        if section:
            if section not in SECTIONS:
                raise ConfigError(f"unknown config key: {key}")
            current = _defaults(getattr(cfg, section))
            if name not in current:
                raise ConfigError(f"unknown config key: {key}")
            sect[section][name] = (_parse_value(value, current[name], key)
                                   if isinstance(value, str) else value)
        else:
            current = {k: v for k, v in _defaults(cfg).items() if k not in SECTIONS}
            if name not in current:
                raise ConfigError(f"unknown config key: {key}")
            top[name] = (_parse_value(value, current[name], key)
                         if isinstance(value, str) else value)
    try:
        parts = {s: replace(getattr(cfg, s), **sect[s]) for s in SECTIONS if sect[s]}
        return replace(cfg, **top, **parts)
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in items:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        items[key] = value
    return apply(base or RunConfig(), items)


def load(path: str | Path) -> RunConfig:
    return parse(Path(path).read_text())


def dump(cfg: RunConfig) -> str:
    lines = []
    for k, v in _defaults(cfg).items():
        if k in SECTIONS:
            continue
        lines.append(f"{k} = {v}")
    for s in SECTIONS:
        for k, v in _defaults(getattr(cfg, s)).items():
            lines.append(f"{s}.{k} = {v!r}" if isinstance(v, float) else f"{s}.{k} = {v}")
    return "\n".join(lines) + "\n"


def from_dict(d: Mapping[str, Any]) -> RunConfig:
    flat = {}
    for k, v in d.items():
        if k in SECTIONS:
            for kk, vv in v.items():
                flat[f"{k}.{kk}"] = vv
        else:
            flat[k] = v
    return apply(RunConfig(), flat)


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path: str | Path, cfg: RunConfig, **extra: Any) -> dict:
    manifest = {"manifest_version": 1, "config": cfg.to_dict(), **extra}
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path: str | Path) -> tuple[RunConfig, dict]:
    m = json.loads(Path(path).read_text())
    if m.get("manifest_version") != 1:
        raise ConfigError(f"unsupported manifest version in {path}")
    return from_dict(m["config"]), m
