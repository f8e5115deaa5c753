"""Experiment configuration: flat ``section.key = value`` lines.

Blank lines and ``#`` comments are ignored.  Tuples are comma-separated.
Every field has a default; ``resolved_text`` writes all of them back out so a
run's echo shows exactly what was applied.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .evalharness import EVAL_SEEDS, AdaptConfig
from .metatrain import MetaConfig
from .taskgen import UniverseConfig
from .tinylm import DEFAULT_SEED, ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    seeds: tuple[int, ...] = EVAL_SEEDS
    shots: int = 16
    batch_size: int = 16
    prompt_mode: str = "standard"
    splits: tuple[str, ...] = ("test", "unseen")

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("eval.seeds must list at least one seed")
        for s in self.splits:
            if s not in ("train", "test", "unseen"):
                raise ConfigError(f"eval.splits: unknown split {s!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = DEFAULT_SEED
    out_dir: str = "runs/default"
    universe_seed: int = 0
    ablation_seeds: tuple[int, ...] = (10, 20)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    tasks: UniverseConfig = field(default_factory=UniverseConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    run: RunConfig = field(default_factory=RunConfig)


SECTIONS = tuple(f.name for f in fields(ExperimentConfig))


def _parse_scalar(text: str, like, where: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {text!r} as {type(like).__name__}") from None
    return text


def _parse_value(text: str, default, where: str):
    if isinstance(default, tuple):
        like = default[0] if default else ""
        items = [t for t in text.split(",") if t.strip()]
        return tuple(_parse_scalar(t, like, where) for t in items)
    return _parse_scalar(text, default, where)


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    updates: dict[str, dict] = {s: {} for s in SECTIONS}
    defaults = {s: getattr(ExperimentConfig(), s) for s in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'section.key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{where}: key {key!r} needs a section prefix such as meta.{key}")
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"{where}: unknown section {section!r} (known: {', '.join(SECTIONS)})")
        known = {f.name for f in fields(defaults[section])}
        if name not in known:
            raise ConfigError(f"{where}: unknown field {key!r}")
        updates[section][name] = _parse_value(value, getattr(defaults[section], name), f"{where} ({key})")
    built = {}
    for s in SECTIONS:
        try:
            built[s] = replace(defaults[s], **updates[s])
        except (ValueError, TypeError) as err:
            raise ConfigError(f"{source}: invalid [{s}] settings: {err}") from None
    return ExperimentConfig(**built)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p))


def resolved_text(config: ExperimentConfig) -> str:
    lines = []
    for s in SECTIONS:
        sec = getattr(config, s)
        for f in fields(sec):
            lines.append(f"{s}.{f.name} = {_format(getattr(sec, f.name))}")
    return "\n".join(lines) + "\n"


def with_overrides(config: ExperimentConfig, **sections) -> ExperimentConfig:
    """``with_overrides(cfg, meta={"steps": 10})``"""
    out = {s: getattr(config, s) for s in SECTIONS}
    for s, kv in sections.items():
        if s not in SECTIONS:
            raise ConfigError(f"unknown section {s!r}")
        out[s] = dataclasses.replace(out[s], **kv)
    return ExperimentConfig(**out)
