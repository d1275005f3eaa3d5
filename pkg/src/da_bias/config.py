"""Flat ``key=value`` configuration files.

One file can drive every subcommand: keys are the field names of
:class:`CorpusSpec`, :class:`ModelConfig` and :class:`TrainConfig` plus a
few run-level keys.  A key shared by several dataclasses (``seed``,
``fusion_mode``) sets all of them.  Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from .corpus import CorpusSpec
from .model import ModelConfig
from .trainer import TrainConfig

# run-level keys that belong to no dataclass
RUN_KEYS: dict[str, type] = {
    "adapt_max_steps": int,     # stage-2 step budget (max_steps covers stage 1)
    "test_limit": Optional[int],  # score only the first N test utterances
    "da_only_fusion": str,      # fusion mode of the DA-only matrix row
}
SECTIONS = (("corpus", CorpusSpec), ("model", ModelConfig), ("train", TrainConfig))


class ConfigError(ValueError):
    pass


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; duplicates are errors."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_overrides(items: Optional[list[str]]) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _field_types(cls) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def known_keys() -> set[str]:
    keys = set(RUN_KEYS)
    for _, cls in SECTIONS:
        keys |= set(_field_types(cls))
    return keys


def coerce(key: str, raw: str, typ) -> Any:
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if origin is tuple:
            parts = [p for p in raw.replace(":", ",").split(",") if p.strip()]
            if len(parts) != len(args):
                raise ValueError(raw)
            return tuple(coerce(key, p.strip(), a) for p, a in zip(parts, args))
        if origin is typing.Union and type(None) in args:
            if raw.lower() in ("", "none", "null"):
                return None
            return coerce(key, raw, next(a for a in args if a is not type(None)))
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {getattr(typ, '__name__', typ)})") from None
    raise ConfigError(f"unsupported config type for {key}: {typ}")


@dataclass
class RunConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt_max_steps: int = 600
    test_limit: Optional[int] = None
    da_only_fusion: str = "early_late"
    raw: dict[str, str] = field(default_factory=dict)

    def echo(self) -> dict:
        """Resolved values of every key, for manifests."""
        out = {"corpus": dataclasses.asdict(self.corpus), "model": self.model.to_json(),
               "train": dataclasses.asdict(self.train)}
        out.update(adapt_max_steps=self.adapt_max_steps, test_limit=self.test_limit,
                   da_only_fusion=self.da_only_fusion)
        return out

    def adapt_config(self, **changes) -> TrainConfig:
        return dataclasses.replace(self.train, stage="adapt", max_steps=self.adapt_max_steps, **changes)


def resolve(values: Mapping[str, str]) -> RunConfig:
    """Build typed configs from raw strings (file values already merged with
    overrides, overrides last)."""
    unknown = sorted(set(values) - known_keys())
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    built = {}
    for name, cls in SECTIONS:
        types = _field_types(cls)
        kwargs = {k: coerce(k, v, types[k]) for k, v in values.items() if k in types}
        if cls is ModelConfig and "feat_dim" not in kwargs:
            corpus = built["corpus"]
            kwargs["feat_dim"] = corpus.feat_dim
        try:
            built[name] = cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid {name} configuration: {e}") from None
    extra = {k: coerce(k, v, RUN_KEYS[k]) for k, v in values.items() if k in RUN_KEYS}
    if built["model"].feat_dim != built["corpus"].feat_dim:
        raise ConfigError(f"feat_dim={built['model'].feat_dim} does not match the corpus "
                          f"({built['corpus'].feat_dim} = f_raw x (stack_left + 1))")
    return RunConfig(built["corpus"], built["model"], built["train"], raw=dict(values), **extra)


def load(path: Optional[str], overrides: Optional[Mapping[str, str]] = None) -> RunConfig:
    values: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        values.update(parse_text(text, str(path)))
    values.update(overrides or {})
    return resolve(values)


def dump(values: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(values.items()))
