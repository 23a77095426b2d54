"""Run configuration: nested per-module sections, strict key checking, dotted
overrides, and per-stage seed derivation from the global seed."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

from .alignment import LampConfig
from .captioner import CaptionerConfig
from .corpus import SynthConfig
from .generator import GenerationConfig, T2MConfig
from .metrics import EvalConfig
from .seeding import derive_seed
from .vqvae import VqConfig


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    verbosity: str = "info"
    corpus: SynthConfig = field(default_factory=SynthConfig)
    tokenizer: VqConfig = field(default_factory=VqConfig)
    alignment: LampConfig = field(default_factory=LampConfig)
    t2m: T2MConfig = field(default_factory=T2MConfig)
    generator: GenerationConfig = field(default_factory=GenerationConfig)
    captioner: CaptionerConfig = field(default_factory=CaptionerConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {"corpus": SynthConfig, "tokenizer": VqConfig, "alignment": LampConfig,
             "t2m": T2MConfig, "generator": GenerationConfig,
             "captioner": CaptionerConfig, "evaluation": EvalConfig}

# stage label used to derive each section's seed from the global seed
_STAGE_OF_SECTION = {"corpus": "make-synthetic", "tokenizer": "train-vq",
                     "alignment": "train-lamp", "t2m": "train-t2m",
                     "captioner": "train-m2t", "generator": "generate",
                     "evaluation": "evaluate"}


def _coerce(key: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"type mismatch for {key}: expected bool, got {type(value).__name__}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"type mismatch for {key}: expected int, got {type(value).__name__}")
        if isinstance(value, float):
            if not value.is_integer():
                raise ConfigError(f"type mismatch for {key}: expected int, got {value}")
            value = int(value)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"type mismatch for {key}: expected float, got {type(value).__name__}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"type mismatch for {key}: expected str, got {type(value).__name__}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"type mismatch for {key}: expected list, got {type(value).__name__}")
        return tuple(value)
    return value


def _build_section(cls, data: dict, prefix: str):
    defaults = cls()
    names = {f.name for f in fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown key {prefix}.{key}")
    kwargs = {f.name: getattr(defaults, f.name) for f in fields(cls)}
    for key, value in data.items():
        kwargs[key] = _coerce(f"{prefix}.{key}", kwargs[key], value)
    return cls(**kwargs)


def config_from_dict(data: dict) -> tuple[RunConfig, set[str]]:
    """Strictly build a RunConfig; returns it plus the set of explicitly-set dotted keys."""
    top_defaults = {"seed": 0, "out_dir": "runs/out", "verbosity": "info"}
    explicit: set[str] = set()
    kwargs: dict = {}
    for key, value in data.items():
        if key in top_defaults:
            kwargs[key] = _coerce(key, top_defaults[key], value)
            explicit.add(key)
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key} must be an object")
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
            explicit.update(f"{key}.{sub}" for sub in value)
        else:
            raise ConfigError(f"unknown key {key}")
    return RunConfig(**kwargs), explicit


def config_to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_override(data: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override through non-object key {p!r}")
    node[parts[-1]] = value


def resolve_config(path: str | Path | None = None, overrides: list[str] | None = None,
                   seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    """Load JSON config (if any), apply dotted overrides, and derive stage seeds.

    Section seeds not explicitly set are derived as hash(global seed, stage name)
    so every stage is independently reproducible.
    """
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text().strip()
        raw = json.loads(text) if text else {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must contain a JSON object")
    for item in overrides or []:
        key, value = parse_override(item)
        apply_override(raw, key, value)
    if seed is not None:
        raw["seed"] = seed
    if out_dir is not None:
        raw["out_dir"] = out_dir
    cfg, explicit = config_from_dict(raw)
    for section, stage in _STAGE_OF_SECTION.items():
        if f"{section}.seed" not in explicit:
            getattr(cfg, section).seed = derive_seed(cfg.seed, stage)
    return cfg


def write_resolved_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True))
    return path
