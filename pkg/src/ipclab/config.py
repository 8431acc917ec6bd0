"""Strict, versioned JSON experiment configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

SCHEMA_VERSION = 1


def _build(cls, data, where: str):
    """Instantiate a config dataclass, rejecting unknown fields."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    extra = sorted(set(data) - names)
    if extra:
        raise ConfigError(f"{where}: unknown field(s) {extra}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        sub = _NESTED.get((cls.__name__, f.name))
        kwargs[f.name] = _build(sub, v, f"{where}.{f.name}") if sub and v is not None else v
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def _number(x, name, where, lo=None, integer=False, allow_none=False):
    if x is None and allow_none:
        return
    if isinstance(x, bool) or not isinstance(x, (int, float)) or (integer and not isinstance(x, int)):
        raise ConfigError(f"{where}.{name}: expected {'an integer' if integer else 'a number'}, got {x!r}")
    if lo is not None and x < lo:
        raise ConfigError(f"{where}.{name}: must be >= {lo}")


@dataclass(frozen=True)
class InitialConfig:
    kind: str = "point"
    x0: list | None = None
    mean: list | None = None
    cov: list | None = None
    burn_in: float = 20.0
    r_min: float = 1.0
    r_max: float = 100.0
    tail: float = 1.0


@dataclass(frozen=True)
class SystemConfig:
    N: int = 3
    d: int = 1
    potential: dict = field(default_factory=lambda: {"family": "pure_power", "gamma": 2.0})
    dt: float = 0.01
    T: float = 10.0
    n_paths: int = 1000
    initial: InitialConfig = InitialConfig()
    moment_s: float = 4.0
    snapshot_every: float | None = None
    layout: str = "relative"

    def __post_init__(self):
        _number(self.N, "N", "system", 2, integer=True)
        _number(self.d, "d", "system", 1, integer=True)
        _number(self.dt, "dt", "system")
        _number(self.T, "T", "system")
        _number(self.n_paths, "n_paths", "system", 1, integer=True)
        _number(self.moment_s, "moment_s", "system")
        _number(self.snapshot_every, "snapshot_every", "system", allow_none=True)
        if self.layout not in ("full", "relative", "Y"):
            raise ConfigError(f"system.layout: unknown layout {self.layout!r}")
        if not isinstance(self.potential, dict):
            raise ConfigError("system.potential: expected an object")


@dataclass(frozen=True)
class SpaceConfig:
    kind: str = "hats"
    n: int = 8
    R_max: float | None = None
    degree: int = 3

    def __post_init__(self):
        if self.kind not in ("hats", "bsplines", "constant"):
            raise ConfigError(f"space.kind: unknown basis kind {self.kind!r}")
        _number(self.n, "n", "space", 1, integer=True)
        _number(self.R_max, "R_max", "space", allow_none=True)


@dataclass(frozen=True)
class DensityConfig:
    enabled: bool = True
    resolution: int = 20
    half_width: float | None = None
    times: list = field(default_factory=list)
    method: str = "histogram"
    fit_kind: str = "polynomial"

    def __post_init__(self):
        _number(self.resolution, "resolution", "density", 2, integer=True)
        if self.method not in ("histogram", "kde"):
            raise ConfigError(f"density.method: unknown method {self.method!r}")
        if self.fit_kind not in ("polynomial", "exponential"):
            raise ConfigError(f"density.fit_kind: unknown kind {self.fit_kind!r}")


@dataclass(frozen=True)
class CoercivityConfig:
    enabled: bool = True
    space: SpaceConfig = SpaceConfig()
    T_list: list = field(default_factory=list)
    C: float = 1.0
    stationary_window: list | None = None
    n_batches: int = 20
    restarts: int = 32

    def __post_init__(self):
        _number(self.C, "C", "coercivity")
        _number(self.n_batches, "n_batches", "coercivity", 2, integer=True)
        if self.stationary_window is not None and len(self.stationary_window) != 2:
            raise ConfigError("coercivity.stationary_window: expected [t0, t1]")


@dataclass(frozen=True)
class LearnConfig:
    enabled: bool = True
    space: SpaceConfig = SpaceConfig()
    window: list | None = None
    reg: float | None = None

    def __post_init__(self):
        _number(self.reg, "reg", "learn", 0, allow_none=True)
        if self.window is not None and len(self.window) != 2:
            raise ConfigError("learn.window: expected [t0, t1]")


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    system: SystemConfig = SystemConfig()
    density: DensityConfig = DensityConfig(enabled=False)
    coercivity: CoercivityConfig = CoercivityConfig(enabled=False)
    learn: LearnConfig = LearnConfig(enabled=False)
    output_dir: str = "out"

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version!r} is not supported (expected {SCHEMA_VERSION})")
        _number(self.seed, "seed", "config", 0, integer=True)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def sha256(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


_NESTED = {
    ("ExperimentConfig", "system"): SystemConfig,
    ("ExperimentConfig", "density"): DensityConfig,
    ("ExperimentConfig", "coercivity"): CoercivityConfig,
    ("ExperimentConfig", "learn"): LearnConfig,
    ("SystemConfig", "initial"): InitialConfig,
    ("CoercivityConfig", "space"): SpaceConfig,
    ("LearnConfig", "space"): SpaceConfig,
}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def parse_json_text(text: str, source: str = "<config>"):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}: JSON parse error at line {e.lineno}, column {e.colno}: {e.msg}") from None


def load_json(path) -> object:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read ({e.strerror})") from None
    return parse_json_text(text, str(path))


def config_from_dict(data) -> ExperimentConfig:
    if not isinstance(data, dict) or "schema_version" not in data:
        raise ConfigError("config: missing schema_version")
    return _build(ExperimentConfig, data, "config")


def load_config(path) -> ExperimentConfig:
    return config_from_dict(load_json(path))


def space_from_dict(data) -> SpaceConfig:
    return _build(SpaceConfig, data, "space")
