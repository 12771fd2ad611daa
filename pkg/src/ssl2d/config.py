"""Flat ``section.key=value`` experiment configuration.

Sections: ``room`` and ``dsp`` (dataset generation), ``grid``, ``model``,
``train``, ``eval``, plus top-level ``seed`` and ``out``. Values are JSON
literals (bare words are read as strings), so ``parse(serialize(c)) == c``.
Unknown keys are rejected.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .dataset import DatasetConfig
from .evaluation import Protocol
from .geom import ARRAY_GRID, GridSpec
from .model import GRID_KEYS, ModelConfig
from .train import TrainConfig

DSP_KEYS = ("sample_rate", "duration", "preroll", "win", "hop")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs"
    data: DatasetConfig = field(default_factory=DatasetConfig)
    grid: GridSpec = field(default_factory=lambda: ARRAY_GRID)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: Protocol = field(default_factory=Protocol)

    def dataset_config(self, **kw) -> DatasetConfig:
        return replace(self.data, grid=self.grid, seed=self.seed, **kw)

    def model_config(self, **kw) -> ModelConfig:
        return replace(self.model, grid=self.grid, **kw)

    def train_config(self, **kw) -> TrainConfig:
        return replace(self.train, **kw)


def desk(cfg: ExperimentConfig | None = None) -> ExperimentConfig:
    """Laptop-scale overrides on top of ``cfg``."""
    cfg = cfg or ExperimentConfig()
    t = cfg.train
    return replace(cfg, train=replace(t, epochs=60, batch_size=64, lr=1e-3, seeds=(0, 1, 2)))


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _dump(v) -> str:
    return json.dumps(v)


def _load(text: str):
    try:
        return _tuplify(json.loads(text))
    except json.JSONDecodeError:
        return text


def _sections(cfg: ExperimentConfig):
    """``(section, key) -> value`` in a fixed order."""
    out = {("", "seed"): cfg.seed, ("", "out"): cfg.out}
    for f in fields(cfg.data):
        if f.name in ("grid", "seed"):
            continue
        sec = "dsp" if f.name in DSP_KEYS else "room"
        out[(sec, f.name)] = getattr(cfg.data, f.name)
    for k in GRID_KEYS:
        out[("grid", k)] = getattr(cfg.grid, k)
    for f in fields(cfg.model):
        if f.name not in ("grid", "seed"):
            out[("model", f.name)] = getattr(cfg.model, f.name)
    for f in fields(cfg.train):
        if f.name != "seed":
            out[("train", f.name)] = getattr(cfg.train, f.name)
    for f in fields(cfg.eval):
        out[("eval", f.name)] = getattr(cfg.eval, f.name)
    return out


def serialize(cfg: ExperimentConfig) -> str:
    lines = []
    for (sec, key), v in _sections(cfg).items():
        lines.append(f"{sec + '.' if sec else ''}{key}={_dump(v)}")
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: ExperimentConfig, pairs: dict) -> ExperimentConfig:
    """Apply ``{"section.key": value}``; unknown keys raise :class:`ConfigError`."""
    known = {(f"{s}.{k}" if s else k) for s, k in _sections(cfg)}
    bad = sorted(set(pairs) - known)
    if bad:
        raise ConfigError(f"unknown config key(s): {', '.join(bad)}")
    groups = {}
    for full, v in pairs.items():
        sec, _, key = full.rpartition(".")
        groups.setdefault(sec, {})[key] = v
    top = groups.pop("", {})
    data_kw = {**groups.get("room", {}), **groups.get("dsp", {})}
    try:
        return replace(
            cfg,
            seed=int(top.get("seed", cfg.seed)),
            out=str(top.get("out", cfg.out)),
            data=replace(cfg.data, **data_kw),
            grid=replace(cfg.grid, **groups.get("grid", {})),
            model=replace(cfg.model, **groups.get("model", {})),
            train=replace(cfg.train, **groups.get("train", {})),
            eval=replace(cfg.eval, **groups.get("eval", {})),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def parse_pairs(lines) -> dict:
    pairs = {}
    for n, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        pairs[key.strip()] = _load(val.strip())
    return pairs


def parse(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return apply_overrides(base or ExperimentConfig(), parse_pairs(text.splitlines()))


def load(path=None, preset: str | None = None, overrides=(), env=None) -> ExperimentConfig:
    """Defaults, then the preset, then the file, then ``--set`` pairs, then ``SSL_SEED``."""
    env = os.environ if env is None else env
    cfg = ExperimentConfig()
    if preset == "desk":
        cfg = desk(cfg)
    elif preset not in (None, "paper"):
        raise ConfigError(f"unknown preset {preset!r}")
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        cfg = parse(p.read_text(), cfg)
    if overrides:
        cfg = apply_overrides(cfg, parse_pairs(overrides))
    if env.get("SSL_SEED") not in (None, ""):
        try:
            cfg = replace(cfg, seed=int(env["SSL_SEED"]))
        except ValueError as e:
            raise ConfigError(f"SSL_SEED must be an integer, got {env['SSL_SEED']!r}") from e
    return cfg

