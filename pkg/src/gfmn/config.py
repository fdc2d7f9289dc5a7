"""Run configuration in a flat ``namespace.key = value`` text format.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Keys belong to the ``trainer``, ``generator`` or ``paths`` namespaces and
map onto the fields of :class:`TrainConfig`, :class:`GeneratorConfig` and
:class:`PathConfig`.  Unknown keys are rejected; missing keys keep their
defaults, and each defaulted key is logged.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .nets import GeneratorConfig
from .trainer import TrainConfig

log = logging.getLogger(__name__)

SEED_ENV = "GFMN_SEED"


@dataclass
class PathConfig:
    data: str = ""
    encoder: str = ""
    stats: str = ""
    out_dir: str = "run"
    resume: str = ""


@dataclass
class RunConfig:
    trainer: TrainConfig = field(default_factory=TrainConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    paths: PathConfig = field(default_factory=PathConfig)


NAMESPACES = ("trainer", "generator", "paths")


def _render_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, text: str, annotation: str):
    optional = "None" in annotation
    if optional and text.lower() == "none":
        return None
    base = annotation.replace("| None", "").strip()
    try:
        if base == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {base}") from None
    return text


def render(config: RunConfig) -> str:
    lines = []
    for ns in NAMESPACES:
        section = getattr(config, ns)
        lines.append(f"# {ns}")
        for f in fields(section):
            lines.append(f"{ns}.{f.name} = {_render_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def parse(text: str) -> RunConfig:
    """Parse configuration text; raises :class:`ConfigError` on any malformed line."""
    values: dict[str, dict[str, object]] = {ns: {} for ns in NAMESPACES}
    types = {ns: {f.name: f.type for f in fields(cls)}
             for ns, cls in (("trainer", TrainConfig), ("generator", GeneratorConfig), ("paths", PathConfig))}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        ns, _, name = key.partition(".")
        if ns not in types or name not in types[ns]:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if name in values[ns]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[ns][name] = _parse_value(key, value, types[ns][name])
    for ns in NAMESPACES:
        for name in types[ns]:
            if name not in values[ns]:
                log.info("config: %s.%s not set, using default", ns, name)
    return RunConfig(TrainConfig(**values["trainer"]), GeneratorConfig(**values["generator"]),
                     PathConfig(**values["paths"]))


def load(path, env: dict | None = None) -> RunConfig:
    """Read a config file and apply the ``GFMN_SEED`` override if present."""
    config = parse(Path(path).read_text(encoding="utf-8"))
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
        log.warning("seed overridden by %s: %d (config had %d)", SEED_ENV, seed, config.trainer.seed)
        config.trainer.seed = seed
    return config
