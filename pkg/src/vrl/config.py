"""Training and run configuration.

Run configs are INI files with sections ``[run]``, ``[train]``, ``[features]``
and ``[scenes]``; keys match the dataclass field names below. Any key can be
overridden from the environment as ``VRL_<SECTION>_<KEY>`` (upper case), e.g.
``VRL_TRAIN_EPOCHS=10``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .features import FeatureConfig

ENV_PREFIX = "VRL_"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.0007
    lr_decay: float = 0.1
    lr_decay_every: int = 10
    gamma: float = 0.9
    tau: int = 10_000
    batch: int = 64
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_anneal_epochs: int = 20
    epochs: int = 60
    max_steps: int = 300
    replay_capacity: int = 50_000
    hidden: tuple[int, ...] = (256, 256)
    separate_trunks: bool = False
    rms_decay: float = 0.95
    rms_eps: float = 1e-6
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        if self.tau < 1 or self.batch < 1 or self.max_steps < 1:
            raise ValueError("tau, batch and max_steps must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def epsilon(self, epoch: int) -> float:
        """Exploration rate used throughout ``epoch`` (0-based)."""
        if self.eps_anneal_epochs <= 0 or epoch >= self.eps_anneal_epochs:
            return self.eps_end
        frac = epoch / self.eps_anneal_epochs
        return self.eps_start + (self.eps_end - self.eps_start) * frac

    def learning_rate(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)


@dataclass(frozen=True)
class SceneSetConfig:
    n_train: int = 300
    n_val: int = 100
    n_test: int = 500
    min_objects: int = 4
    max_objects: int = 8
    noise: float = 0.1
    canvas: float = 10.0
    confusion: float = 0.0
    clutter: int = 0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    variant: str = "vrl"
    graph: str = ""
    train_scenes: str = ""
    val_scenes: str = ""
    test_scenes: str = ""
    image_features: str = ""
    instance_features: str = ""
    output: str = "runs/default"
    train: TrainConfig = field(default_factory=TrainConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    scenes: SceneSetConfig = field(default_factory=SceneSetConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of everything that affects results; the output location is left out."""
        d = self.to_dict()
        d.pop("output")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _coerce(value: str, typ, current):
    if isinstance(current, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(current, tuple):
        return tuple(int(x) for x in value.replace(",", " ").split())
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def _apply(obj, section: str, values: dict, env: dict):
    updates = {}
    names = {f.name: f for f in fields(obj)}
    for key, raw in values.items():
        if key not in names:
            raise ValueError(f"unknown key [{section}] {key}")
        updates[key] = _coerce(raw, names[key].type, getattr(obj, key))
    for f in fields(obj):
        env_key = f"{ENV_PREFIX}{section.upper()}_{f.name.upper()}"
        if env_key in env and not dataclasses.is_dataclass(getattr(obj, f.name)):
            updates[f.name] = _coerce(env[env_key], f.type, getattr(obj, f.name))
    return dataclasses.replace(obj, **updates) if updates else obj


def load_run_config(path: str | Path | None = None, env: dict | None = None) -> RunConfig:
    env = dict(os.environ) if env is None else env
    parser = configparser.ConfigParser()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        unknown = set(parser.sections()) - {"run", "train", "features", "scenes"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
    get = lambda s: dict(parser[s]) if parser.has_section(s) else {}
    base = RunConfig()
    train = _apply(base.train, "train", get("train"), env)
    feats = _apply(base.features, "features", get("features"), env)
    scenes = _apply(base.scenes, "scenes", get("scenes"), env)
    run = _apply(base, "run", get("run"), env)
    return dataclasses.replace(run, train=train, features=feats, scenes=scenes)


def dump_run_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()

    def fmt(v):
        if isinstance(v, tuple):
            return " ".join(str(x) for x in v)
        return str(v)

    parser["run"] = {f.name: fmt(getattr(cfg, f.name)) for f in fields(cfg)
                     if not dataclasses.is_dataclass(getattr(cfg, f.name))}
    for name in ("train", "features", "scenes"):
        sub = getattr(cfg, name)
        parser[name] = {f.name: fmt(getattr(sub, f.name)) for f in fields(sub)}
    from io import StringIO
    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named purpose (``"init"``, ``"eps"``, ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *extra])
