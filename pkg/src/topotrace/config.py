"""Pipeline configuration from an INI file.

Precedence, highest first: command-line flags, the config file, built-in
defaults. Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from topotrace.errors import ConfigError


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s: str) -> int | None:
    return None if s.strip().lower() in ("", "none", "all") else int(s)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "run": {"seed": (int, 0)},
    "paths": {
        "questions": (str, "questions.jsonl"),
        "responses": (str, "responses.jsonl"),
        "errors": (str, "errors.jsonl"),
        "labels": (str, "labels.jsonl"),
        "sft": (str, "sft.jsonl"),
        "pairs": (str, "pairs.jsonl"),
        "report_dir": (str, "report"),
        "simpo_dir": (str, "simpo"),
        "cache_dir": (str, "cache"),
    },
    "generate": {
        "base_url": (str, "http://127.0.0.1:8000"),
        "api_key_env_name": (str, "OPENAI_API_KEY"),
        "model_name": (str, "gpt-4o-mini"),
        "temperature": (float, 0.7),
        "n_samples_per_topology": (int, 10),
        "max_tokens": (int, 1024),
        "concurrency_limit": (int, 4),
        "max_depth": (int, 4),
        "n_children": (int, 3),
        "n_neighbors": (int, 2),
        "timeout": (float, 60.0),
        "max_attempts": (int, 5),
        "backoff_base": (float, 1.0),
        "backoff_max": (float, 30.0),
        "topologies": (str, "chain,tree,graph"),
    },
    "labeling": {"q_hi": (float, 0.85), "q_lo": (float, 0.15)},
    "pairs": {
        "k_easy": (int, 1000),
        "k_medium": (int, 1000),
        "k_hard": (int, 1000),
        "keep_top_m": (int, 1),
        "max_pairs": (_opt_int, 4),
        "length_quantile": (float, 0.25),
    },
    "simpo": {
        "beta": (float, 2.0),
        "gamma": (float, 0.5),
        "learning_rate": (float, 0.1),
        "steps": (int, 500),
        "vocab_size": (int, 64),
        "max_tokens": (_opt_int, 256),
        "batch_size": (_opt_int, None),
        "ntp_steps": (int, 0),
        "ntp_learning_rate": (float, 0.1),
    },
    "report": {"figures": (_bool, True)},
}

PATH_KEYS = frozenset(SCHEMA["paths"])


@dataclass
class PipelineConfig:
    values: dict[str, dict[str, Any]] = field(default_factory=dict)
    source: str | None = None
    base_dir: Path = field(default_factory=Path.cwd)

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    def path(self, key: str) -> Path:
        return self.values["paths"][key]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def override(self, section: str, key: str, value: Any) -> None:
        """Apply a command-line value (``None`` means the flag was not given)."""
        if value is None:
            return
        if section == "paths":
            value = Path(value).resolve()
        self.values[section][key] = value


def defaults() -> PipelineConfig:
    cfg = PipelineConfig({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})
    cfg.values["paths"] = {k: (cfg.base_dir / v).resolve() for k, v in cfg.values["paths"].items()}
    _validate(cfg, {})
    return cfg


def _line_of(lines: list[str], section: str, key: str | None) -> int | None:
    current = None
    for i, raw in enumerate(lines, start=1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            if key is None and current == section:
                return i
            continue
        if current == section and key is not None:
            name = s.split("=", 1)[0].split(":", 1)[0].strip()
            if name == key:
                return i
    return None


def load_config(path: str | os.PathLike | None) -> PipelineConfig:
    if path is None:
        return defaults()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    lines = text.splitlines()
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], str(path), line) from None

    cfg = defaults()
    cfg.source = str(path)
    cfg.base_dir = path.resolve().parent
    cfg.values["paths"] = {k: (cfg.base_dir / v).resolve() for k, (_, v) in SCHEMA["paths"].items()}
    located: dict[tuple[str, str], int | None] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", str(path), _line_of(lines, section, None))
        for key, raw in parser.items(section):
            line = _line_of(lines, section, key)
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", str(path), line)
            conv = SCHEMA[section][key][0]
            try:
                value = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}", str(path), line) from None
            if section == "paths":
                value = (cfg.base_dir / value).resolve()
            cfg.values[section][key] = value
            located[(section, key)] = line
    _validate(cfg, located)
    return cfg


def _validate(cfg: PipelineConfig, located: dict[tuple[str, str], int | None]) -> None:
    def fail(section: str, key: str, msg: str):
        raise ConfigError(msg, cfg.source, located.get((section, key)))

    lab = cfg.values["labeling"]
    for key in ("q_hi", "q_lo"):
        if not 0.0 < lab[key] < 1.0:
            fail("labeling", key, f"{key} must lie in (0, 1), got {lab[key]}")
    if not lab["q_lo"] < lab["q_hi"]:
        fail("labeling", "q_lo", f"q_lo ({lab['q_lo']}) must be below q_hi ({lab['q_hi']})")
    pq = cfg.values["pairs"]["length_quantile"]
    if not 0.0 <= pq <= 1.0:
        fail("pairs", "length_quantile", f"length_quantile must lie in [0, 1], got {pq}")
    if cfg.values["simpo"]["beta"] <= 0:
        fail("simpo", "beta", "beta must be positive")
    for key, value in cfg.values["paths"].items():
        if not value.parent.exists() and not _creatable(value.parent):
            fail("paths", key, f"path {value} cannot be resolved")


def check(cfg: PipelineConfig) -> None:
    """Re-validate after command-line overrides."""
    _validate(cfg, {})


def _creatable(d: Path) -> bool:
    # a missing directory is fine if its nearest existing ancestor is a directory
    for parent in (d, *d.parents):
        if parent.exists():
            return parent.is_dir()
    return False
