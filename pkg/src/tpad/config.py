"""Flat ``key = value`` run configuration.

Every key belongs to one schema made of the training fields, the synthetic
corpus fields and a handful of run-level settings. Unknown keys, unparsable
values and (for files) missing keys are rejected with a ``ConfigError``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .dataset import SynthConfig
from .errors import ConfigError
from .pipeline import VARIANTS, TrainConfig

_SECTION = "run"


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    variant: str = "full"
    # empty paths mean "generate a synthetic corpus"
    items_path: str = ""
    sessions_path: str = ""
    min_item_count: int = 5
    min_session_len: int = 2
    split_ratios: tuple[float, ...] = (7.0, 2.0, 1.0)
    cold_frac: float = 0.0
    ablate_variants: tuple[str, ...] = ("full", "tpad-na")
    ablate_seeds: int = 5


_GROUPS = {"train": TrainConfig, "synth": SynthConfig, "run": RunSettings}


def _schema() -> dict[str, tuple[str, dataclasses.Field]]:
    out = {}
    for group, cls in _GROUPS.items():
        for f in fields(cls):
            if f.name in out:
                raise AssertionError(f"config key {f.name} defined twice")
            out[f.name] = (group, f)
    return out


SCHEMA = _schema()


def _parse_value(key: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if key == "t_mat":
            if raw.lower() in ("", "none"):
                return None
            return tuple(tuple(float(x) for x in row.split(",")) for row in raw.split(";") if row.strip())
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(x) for x in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(",".join(repr(float(x)) for x in row) for row in value)
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    run: RunSettings = field(default_factory=RunSettings)

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def variant(self) -> str:
        return self.run.variant

    def flat(self) -> dict[str, Any]:
        out = {}
        for group in _GROUPS:
            out.update(dataclasses.asdict(getattr(self, group)))
        return out

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Apply already-typed or string values; strings are parsed against the schema."""
        unknown = sorted(set(overrides) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        per_group: dict[str, dict] = {g: {} for g in _GROUPS}
        current = self.flat()
        for key, value in overrides.items():
            group, _ = SCHEMA[key]
            if isinstance(value, str) and not isinstance(current[key], str):
                value = _parse_value(key, value, current[key] if current[key] is not None else ())
            per_group[group][key] = value
        try:
            new = {g: dataclasses.replace(getattr(self, g), **kw) for g, kw in per_group.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        cfg = RunConfig(**new)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(sorted(VARIANTS))}")
        bad = [v for v in self.run.ablate_variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown ablation variants: {', '.join(bad)}")
        if not 0.0 <= self.run.cold_frac < 1.0:
            raise ConfigError("cold_frac must lie in [0, 1)")
        if len(self.run.split_ratios) != 3 or min(self.run.split_ratios) <= 0:
            raise ConfigError("split_ratios needs three positive numbers")
        if bool(self.run.items_path) != bool(self.run.sessions_path):
            raise ConfigError("items_path and sessions_path must be given together")
        if self.run.ablate_seeds < 1:
            raise ConfigError("ablate_seeds must be at least 1")

    def to_text(self) -> str:
        lines = []
        for group, cls in _GROUPS.items():
            lines.append(f"# {group}")
            obj = getattr(self, group)
            lines += [f"{f.name} = {_format_value(getattr(obj, f.name))}" for f in fields(cls)]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        """Digest of everything except the seed (part of the directory name) and the
        variant (part of each per-variant artifact name)."""
        body = {k: v for k, v in self.flat().items() if k not in ("seed", "variant")}
        return hashlib.sha256(json.dumps(body, sort_keys=True, default=list).encode()).hexdigest()[:12]


def parse_config_text(text: str, require_all: bool = True) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=None)
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    values = dict(parser[_SECTION])
    if require_all:
        missing = sorted(set(SCHEMA) - set(values))
        if missing:
            raise ConfigError(f"missing config keys: {', '.join(missing)}")
    return RunConfig().with_overrides(values)


def load_config(path: str | Path, require_all: bool = True) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, require_all)
