"""Project configuration: one TOML file with a fixed schema.

Sections (all optional, defaults in brackets)::

    [converter]        ConverterParams fields
    [operating_point]  P_ref [1.0], V_or_Q_ref [unset]
    [weights]          kind = "pv" | "pq" | "custom" ["pv"], file (custom only)
    [synthesis]        starts [8], seed [0], max_iters [2000], box [5e4], margin [0.05],
                       grid_points [400], lg [0.05 .. 0.5], time_budget [unset], mask [all true]
    [controller]       kind = "hinf" | "droop" | "pll" | "published" | "file" ["hinf"], file, pq_file
    [network]          preset = "reference" ["reference"] or file, lg [0.2, 0.2, 0.2]
    [simulation]       scenario ["fig5"], scenario_file, dt [2e-5], decimation [50],
                       icd_limit [1.1], icq_limit [0.5], lg [0.05, 0.2, 0.35, 0.5]
    [output]           dir ["out"]

Relative file paths are resolved against the directory of the config file.
"""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import tomli
import tomli_w

from .converter import ConverterParams
from .network import NetworkSpec, reference_network
from .weights import WeightingSpec, default_pq_weights, default_pv_weights

__all__ = [
    "ConfigError",
    "SynthesisSettings",
    "ControllerSettings",
    "NetworkSettings",
    "SimulationSettings",
    "ProjectConfig",
    "load_config",
    "parse_config",
    "dump_config",
    "load_network",
    "network_to_dict",
    "read_gain",
    "write_gain",
]


class ConfigError(ValueError):
    """Invalid configuration; ``line`` points into the source text when known."""

    def __init__(self, msg: str, line: int | None = None):
        super().__init__(msg if line is None else f"line {line}: {msg}")
        self.line = line


def _default_lg():
    return [round(0.05 * k, 10) for k in range(1, 11)]


@dataclass
class SynthesisSettings:
    starts: int = 8
    seed: int = 0
    max_iters: int = 2000
    box: float = 5e4
    margin: float = 0.05
    grid_points: int = 400
    lg: list = field(default_factory=_default_lg)
    time_budget: float | None = None
    mask: list | None = None

    def validate(self):
        if self.starts < 1:
            raise ValueError("synthesis.starts must be at least 1")
        if self.max_iters < 1 or self.grid_points < 2:
            raise ValueError("synthesis.max_iters and synthesis.grid_points must be positive")
        if not self.lg or min(self.lg) <= 0:
            raise ValueError("synthesis.lg must be a nonempty list of positive inductances")
        if self.box <= 0:
            raise ValueError("synthesis.box must be positive")
        if self.mask is not None and np.shape(self.mask) != (3, 7):
            raise ValueError("synthesis.mask must be 3x7")


@dataclass
class ControllerSettings:
    kind: str = "hinf"
    file: str | None = None
    pq_file: str | None = None

    def validate(self):
        if self.kind not in ("hinf", "droop", "pll", "published", "file"):
            raise ValueError(f"controller.kind {self.kind!r} is not one of hinf, droop, pll, published, file")
        if self.kind == "file" and not self.file:
            raise ValueError("controller.kind = 'file' needs controller.file")


@dataclass
class NetworkSettings:
    preset: str | None = "reference"
    file: str | None = None
    lg: list = field(default_factory=lambda: [0.2, 0.2, 0.2])

    def validate(self):
        if self.file is None and self.preset != "reference":
            raise ValueError("network needs preset = 'reference' or a file")


@dataclass
class SimulationSettings:
    scenario: str = "fig5"
    scenario_file: str | None = None
    dt: float = 2e-5
    decimation: int = 50
    icd_limit: float = 1.1
    icq_limit: float = 0.5
    lg: list = field(default_factory=lambda: [0.05, 0.2, 0.35, 0.5])

    def validate(self):
        if self.dt <= 0 or self.decimation < 1:
            raise ValueError("simulation.dt must be positive and decimation at least 1")
        if self.icd_limit <= 0 or self.icq_limit <= 0:
            raise ValueError("simulation limits must be positive")


@dataclass
class ProjectConfig:
    converter: dict = field(default_factory=dict)
    operating_point: dict = field(default_factory=lambda: {"P_ref": 1.0})
    weights: dict = field(default_factory=lambda: {"kind": "pv"})
    synthesis: SynthesisSettings = field(default_factory=SynthesisSettings)
    controller: ControllerSettings = field(default_factory=ControllerSettings)
    network: NetworkSettings = field(default_factory=NetworkSettings)
    simulation: SimulationSettings = field(default_factory=SimulationSettings)
    output: dict = field(default_factory=lambda: {"dir": "out"})
    base_dir: str = "."

    def params(self) -> ConverterParams:
        return ConverterParams(**self.converter)

    def path(self, p: str | None) -> Path | None:
        if p is None:
            return None
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    def out_dir(self) -> Path:
        return self.path(self.output.get("dir", "out"))

    def weighting(self) -> WeightingSpec:
        kind = self.weights.get("kind", "pv")
        if kind == "pv":
            return default_pv_weights()
        if kind == "pq":
            return default_pq_weights()
        f = self.path(self.weights.get("file"))
        if f is None or not f.exists():
            raise ConfigError(f"weights file {f} not found")
        return WeightingSpec.from_dict(tomli.loads(f.read_text()))

    def to_dict(self) -> dict:
        d = {
            "converter": dict(self.converter),
            "operating_point": dict(self.operating_point),
            "weights": dict(self.weights),
            "output": dict(self.output),
        }
        for name in ("synthesis", "controller", "network", "simulation"):
            d[name] = {k: v for k, v in dataclasses.asdict(getattr(self, name)).items() if v is not None}
        return d


_SECTIONS = {"synthesis": SynthesisSettings, "controller": ControllerSettings,
             "network": NetworkSettings, "simulation": SimulationSettings}
_PLAIN = ("converter", "operating_point", "weights", "output")


def _line_of(text: str, key: str, section: str | None = None) -> int | None:
    """Line number of the first ``key =`` assignment, optionally within one section."""
    lines = text.splitlines()
    current = None
    for i, line in enumerate(lines):
        h = re.match(r"[ \t]*\[([^\]]+)\]", line)
        if h:
            current = h.group(1).strip()
            continue
        if (section is None or current == section) and re.match(rf"[ \t]*{re.escape(key)}[ \t]*=", line):
            return i + 1
    return None


def parse_config(text: str, base_dir: str | Path = ".") -> ProjectConfig:
    """Parse and validate configuration text."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", int(m.group(1)) if m else None) from exc
    return from_dict(raw, base_dir, text)


def from_dict(raw: Mapping[str, Any], base_dir: str | Path = ".", text: str = "") -> ProjectConfig:
    unknown = set(raw) - set(_SECTIONS) - set(_PLAIN)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown section {key!r}", _section_line(text, key) or _line_of(text, key))
    kw: dict[str, Any] = {"base_dir": str(base_dir)}
    for name in _PLAIN:
        if name in raw:
            kw[name] = dict(raw[name])
    for name, cls in _SECTIONS.items():
        sec = dict(raw.get(name, {}))
        names = {f.name for f in dataclasses.fields(cls)}
        for key in sec:
            if key not in names:
                raise ConfigError(f"unknown key {name}.{key}", _line_of(text, key, name))
        try:
            obj = cls(**sec)
            obj.validate()
        except (TypeError, ValueError) as exc:
            key = next((k for k in sec if k in str(exc)), name)
            raise ConfigError(str(exc), _line_of(text, key, name) or _section_line(text, name)) from exc
        kw[name] = obj
    cfg = ProjectConfig(**kw)
    try:
        cfg.params()
    except (TypeError, ValueError) as exc:
        key = next((k for k in cfg.converter if k in str(exc)), "converter")
        raise ConfigError(f"converter: {exc}", _line_of(text, key, "converter") or _section_line(text, "converter")) from exc
    if cfg.weights.get("kind", "pv") not in ("pv", "pq", "custom"):
        raise ConfigError("weights.kind must be pv, pq or custom", _line_of(text, "kind", "weights"))
    return cfg


def _section_line(text: str, name: str) -> int | None:
    m = re.search(rf"^[ \t]*\[{re.escape(name)}\]", text, re.M)
    return None if m is None else text.count("\n", 0, m.start()) + 1


def load_config(path: str | Path | None) -> ProjectConfig:
    """Read a config file; ``None`` gives the defaults rooted at the working directory."""
    if path is None:
        return ProjectConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    return parse_config(p.read_text(), p.parent)


def dump_config(cfg: ProjectConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


# ---------------------------------------------------------------- files

def network_to_dict(spec: NetworkSpec) -> dict:
    return {
        "nodes": list(spec.nodes),
        "branches": [list(b) for b in spec.branches],
        "self_loops": [list(b) for b in spec.self_loops],
        "boundary": list(spec.boundary),
        "loads": {str(k): v for k, v in spec.loads.items()},
        "omega0": spec.omega0,
        "tau": spec.tau,
    }


def load_network(cfg: ProjectConfig) -> NetworkSpec:
    ns = cfg.network
    if ns.file is None:
        return reference_network()
    f = cfg.path(ns.file)
    if not f.exists():
        raise ConfigError(f"network file {f} not found")
    d = tomli.loads(f.read_text())
    try:
        return NetworkSpec(
            nodes=tuple(d["nodes"]),
            branches=tuple(tuple(b) for b in d["branches"]),
            self_loops=tuple(tuple(b) for b in d.get("self_loops", ())),
            boundary=tuple(d.get("boundary", ())),
            loads={int(k) if str(k).isdigit() else k: float(v) for k, v in d.get("loads", {}).items()},
            omega0=float(d.get("omega0", 2 * np.pi * 50)),
            tau=d.get("tau"),
        )
    except KeyError as exc:
        raise ConfigError(f"network file misses {exc}") from exc


def write_gain(path: str | Path, K) -> None:
    """Gain as a whitespace-separated 3x7 table at full double precision."""
    K = np.asarray(getattr(K, "K", K), dtype=float)
    lines = [" ".join(f"{v:.17g}" for v in row) for row in K]
    Path(path).write_text("\n".join(lines) + "\n")


def read_gain(path: str | Path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"gain file {p} not found")
    K = np.loadtxt(p, ndmin=2)
    if K.shape != (3, 7):
        raise ConfigError(f"gain file {p} must hold a 3x7 matrix, got {K.shape}")
    return K
