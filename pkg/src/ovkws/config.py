"""Run configuration: one flat key=value document covering every pipeline
stage, with defaults matching the full-scale training recipe. Stage outputs
are content-addressed: each stage directory name carries a hash of the
configuration keys that stage consumes plus its upstream hash, so artifacts
from different configurations can never silently mix.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .features import FrontendConfig
from .model import ModelSpec
from .spatial import IrGeometry
from .training import TrainConfig


@dataclass(frozen=True)
class PathsConfig:
    work_dir: str = "runs"
    source_corpus: str = ""


@dataclass(frozen=True)
class CorpusConfig:
    synthetic: bool = False
    synthetic_speakers: int = 60
    split_train: float = 0.8
    split_validation: float = 0.1
    split_test: float = 0.1
    own_fraction: float = 0.75

    @property
    def split_fractions(self) -> tuple:
        return (self.split_train, self.split_validation, self.split_test)


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5
    num_thresholds: int = 1001
    num_probe_signals: int = 8


@dataclass
class RunConfig:
    seed: int = 0
    num_model_seeds: int = 3
    paths: PathsConfig = field(default_factory=PathsConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    geometry: IrGeometry = field(default_factory=IrGeometry)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_TOP_FIELDS = ("seed", "num_model_seeds")
_SECTIONS = (
    ("paths", PathsConfig),
    ("corpus", CorpusConfig),
    ("geometry", IrGeometry),
    ("frontend", FrontendConfig),
    ("model", ModelSpec),
    ("train", TrainConfig),
    ("eval", EvalConfig),
)

_SECTION_NOTES = {
    "paths": "artifact root and source corpus location",
    "corpus": "speaker splits, roles, and the synthetic corpus size",
    "geometry": "synthetic impulse-response bank geometry",
    "frontend": "band-pass, framing, and MFCC parameters",
    "model": "residual network size",
    "train": "optimization, augmentation, and loss weighting",
    "eval": "decision threshold and sweep resolution",
}

# configuration keys each stage consumes; the stage hash covers exactly these
STAGE_KEYS = {
    "forge": ("seed", "paths.source_corpus", "corpus.", "geometry."),
    "featurize": ("frontend.",),
    "train": ("num_model_seeds", "model.", "train."),
    "evaluate": ("eval.",),
}
STAGE_ORDER = ("forge", "featurize", "train", "evaluate")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def _parse_like(template, text: str):
    if isinstance(template, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    if isinstance(template, (tuple, list)):
        parts = [p.strip() for p in text.split(",")] if text.strip() else []
        elem = template[0] if len(template) else 0.0
        return tuple(_parse_like(elem, p) for p in parts)
    return text


def flatten(config: RunConfig) -> dict[str, str]:
    flat: dict[str, str] = {}
    for name in _TOP_FIELDS:
        flat[name] = _format_value(getattr(config, name))
    for section, cls in _SECTIONS:
        obj = getattr(config, section)
        for f in dataclasses.fields(cls):
            flat[f"{section}.{f.name}"] = _format_value(getattr(obj, f.name))
    return flat


def apply_overrides(config: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Return a copy of `config` with flat dotted keys replaced by parsed
    values; unknown keys are rejected by name."""
    defaults = {name: dict() for name, _ in _SECTIONS}
    top: dict = {}
    known = set(flatten(config))
    for key, text in overrides.items():
        if key not in known:
            raise KeyError(f"unknown configuration key {key!r}")
        if "." in key:
            section, name = key.split(".", 1)
            current = getattr(getattr(config, section), name)
            defaults[section][name] = _parse_like(current, text)
        else:
            top[key] = _parse_like(getattr(config, key), text)
    out = dataclasses.replace(config, **top)
    for section, cls in _SECTIONS:
        if defaults[section]:
            setattr(out, section,
                    dataclasses.replace(getattr(config, section), **defaults[section]))
    return out


def parse_config_text(text: str) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return apply_overrides(RunConfig(), parse_config_text(fh.read()))


def serialize_config(config: RunConfig) -> str:
    """Full, commented echo of the effective configuration."""
    lines = ["# effective configuration; every key may appear in a --config file"]
    flat = flatten(config)
    for name in _TOP_FIELDS:
        lines.append(f"{name} = {flat[name]}")
    for section, _ in _SECTIONS:
        lines.append("")
        lines.append(f"# {section}: {_SECTION_NOTES[section]}")
        for key, value in flat.items():
            if key.startswith(section + "."):
                lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def stage_hash(config: RunConfig, stage: str, upstream: str | None = None) -> str:
    flat = flatten(config)
    subset = {k: v for k, v in flat.items()
              if any(k == p or (p.endswith(".") and k.startswith(p))
                     for p in STAGE_KEYS[stage])}
    payload = json.dumps({"stage": stage, "config": subset, "upstream": upstream},
                         sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def stage_hashes(config: RunConfig) -> dict[str, str]:
    """Chained content hashes for every stage of the pipeline."""
    hashes: dict[str, str] = {}
    upstream = None
    for stage in STAGE_ORDER:
        upstream = stage_hash(config, stage, upstream)
        hashes[stage] = upstream
    return hashes
