"""Run configuration stored as a sectioned ``key = value`` file.

Every key name is unique across sections, so each one maps to a command
line override flag of the same name (``--r_max 8``).
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .smoother import POLICIES

__all__ = [
    "GeometryConfig",
    "MeshConfig",
    "PhysicsConfig",
    "SolverConfig",
    "StudyConfig",
    "OutputConfig",
    "RunConfig",
    "ConfigError",
    "SECTIONS",
]


class ConfigError(ValueError):
    pass


@dataclass
class GeometryConfig:
    length: float = 2.2
    height: float = 0.41
    center_x: float = 0.2
    center_y: float = 0.2
    diameter: float = 0.1
    box_x0: float = -0.025
    box_x1: float = 2.225
    box_y0: float = -0.02
    box_y1: float = 0.43


@dataclass
class MeshConfig:
    root_nx: int = 5
    root_ny: int = 1
    root_size: float = 0.45
    base_level: int = 6
    r_max: int = 7
    levels: int = 4
    subdivision: int = 4
    gauss: int = 2
    surface_resolution: int = 8


@dataclass
class PhysicsConfig:
    eta: float = 1e-3
    u_bar: float = 0.3
    alpha_fict: float = 1e-10
    beta_n: float = 100.0
    force_x: float = 0.0
    force_y: float = 0.0


@dataclass
class SolverConfig:
    nu1: int = 6
    nu2: int = 6
    omega: float = 0.8
    target: float = 1e-9
    max_iter: int = 100
    policy: str = "cache_inverse"
    threads: int = 1
    partitions: int = 1
    coarse_cap: int = 6000


@dataclass
class StudyConfig:
    mms_levels: str = "2,3,4"
    mms_rate_min: float = 1.5
    sweeps: int = 20
    repeats: int = 5
    ranks: str = "1,2,4,8"


@dataclass
class OutputConfig:
    directory: str = "."
    report: str = "report.csv"
    field: str = "solution.csv"
    prefix: str = "operator"


SECTIONS = {
    "geometry": GeometryConfig,
    "mesh": MeshConfig,
    "physics": PhysicsConfig,
    "solver": SolverConfig,
    "study": StudyConfig,
    "output": OutputConfig,
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise ConfigError(f"expected a comma separated integer list, got {text!r}") from None


@dataclass
class RunConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    study: StudyConfig = field(default_factory=StudyConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    # -- key access ---------------------------------------------------------

    @staticmethod
    def keys() -> dict:
        """``key -> (section, type)`` over all sections."""
        out = {}
        for sec, cls in SECTIONS.items():
            for f in fields(cls):
                out[f.name] = (sec, type(f.default))
        return out

    def get(self, key: str):
        sec, _ = self._where(key)
        return getattr(getattr(self, sec), key)

    def set(self, key: str, value) -> None:
        """Set ``key`` from a value or its text form."""
        sec, typ = self._where(key)
        if isinstance(value, str) and typ is not str:
            try:
                value = typ(value.strip())
            except ValueError:
                raise ConfigError(f"{key}: cannot read {value!r} as {typ.__name__}") from None
        setattr(getattr(self, sec), key, typ(value))

    def _where(self, key):
        k = self.keys()
        if key not in k:
            raise ConfigError(f"unknown configuration key {key!r}")
        return k[key]

    # -- text form ------------------------------------------------------------

    def to_parser(self) -> configparser.ConfigParser:
        cp = configparser.ConfigParser(interpolation=None)
        for sec in SECTIONS:
            obj = getattr(self, sec)
            cp[sec] = {f.name: _emit(getattr(obj, f.name)) for f in fields(obj)}
        return cp

    def dumps(self) -> str:
        lines = []
        for sec, body in self.to_parser().items():
            if sec == "DEFAULT":
                continue
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in body.items())
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        cfg = cls()
        known = cls.keys()
        for sec in cp.sections():
            if sec not in SECTIONS:
                raise ConfigError(f"unknown section [{sec}]")
            for key, val in cp[sec].items():
                if key not in known or known[key][0] != sec:
                    raise ConfigError(f"unknown key {key!r} in section [{sec}]")
                cfg.set(key, val)
        cfg.validate()
        return cfg

    @classmethod
    def read(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.loads(text)

    def copy(self) -> "RunConfig":
        return dataclasses.replace(
            self, **{s: dataclasses.replace(getattr(self, s)) for s in SECTIONS}
        )

    def as_dict(self) -> dict:
        return {k: self.get(k) for k in self.keys()}

    # -- checks ---------------------------------------------------------------

    def validate(self) -> None:
        g, m, p, s = self.geometry, self.mesh, self.physics, self.solver
        if not (g.box_x0 < g.box_x1 and g.box_y0 < g.box_y1):
            raise ConfigError("embedding box is empty")
        if m.root_nx < 1 or m.root_ny < 1 or m.root_size <= 0:
            raise ConfigError("root grid must have positive extent")
        if m.root_nx * m.root_size < g.box_x1 - g.box_x0 - 1e-12 or m.root_ny * m.root_size < g.box_y1 - g.box_y0 - 1e-12:
            raise ConfigError("root grid does not cover the embedding box")
        if not 0 <= m.base_level <= m.r_max:
            raise ConfigError("need 0 <= base_level <= r_max")
        if m.levels < 1:
            raise ConfigError("levels must be at least 1")
        if p.eta <= 0 or not 0 < p.alpha_fict <= 1 or p.beta_n <= 0:
            raise ConfigError("physics parameters out of range")
        if s.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}")
        if s.threads < 1 or s.partitions < 1 or s.nu1 < 0 or s.nu2 < 0 or s.max_iter < 0:
            raise ConfigError("solver counts must be non-negative (threads, partitions >= 1)")
        if not 0 < s.omega <= 2:
            raise ConfigError("omega must lie in (0, 2]")
        if self.study.sweeps < 1 or self.study.repeats < 1:
            raise ConfigError("sweeps and repeats must be positive")
        if len(self.mms_levels()) < 2:
            raise ConfigError("mms_levels needs at least two refinements")
        if not self.ranks() or min(self.ranks()) < 1:
            raise ConfigError("ranks must be positive integers")

    def mms_levels(self) -> list[int]:
        return _int_list(self.study.mms_levels)

    def ranks(self) -> list[int]:
        return _int_list(self.study.ranks)


def _emit(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
