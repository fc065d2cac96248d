"""Scenario configuration: YAML with explicit units, resolved to SI.

Dimensional values are written as strings with a unit suffix, e.g.
``budget: 15 kJ`` or ``speed: 10 m/s``. A bare number where a unit is
required, an unknown suffix, an unknown key or a value of the wrong kind is
reported with the line it appears on, before anything is computed.
"""

from __future__ import annotations

import copy
import math
import re
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import yaml

# unit -> (dimension, factor to SI); dBm is handled separately
UNITS = {
    "m": ("length", 1.0),
    "km": ("length", 1e3),
    "s": ("time", 1.0),
    "min": ("time", 60.0),
    "W": ("power", 1.0),
    "mW": ("power", 1e-3),
    "dBm": ("power", None),
    "J": ("energy", 1.0),
    "kJ": ("energy", 1e3),
    "bps": ("rate", 1.0),
    "Mbps": ("rate", 1e6),
    "bit": ("size", 1.0),
    "MB": ("size", 8e6),
    "m/s": ("speed", 1.0),
    "km/h": ("speed", 1.0 / 3.6),
    "Hz": ("frequency", 1.0),
    "MHz": ("frequency", 1e6),
}

_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(\S+)?\s*$")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


def parse_quantity(text, dimension: str) -> float:
    """'15 kJ' -> 15000.0. Raises ValueError on a missing or foreign unit."""
    if isinstance(text, bool) or not isinstance(text, str):
        if isinstance(text, (int, float)) and not isinstance(text, bool):
            raise ValueError(f"missing unit for {dimension} value {text!r}")
        raise ValueError(f"expected a {dimension} quantity, got {text!r}")
    m = _QUANTITY.match(text)
    if not m:
        raise ValueError(f"cannot parse quantity {text!r}")
    value, unit = float(m.group(1)), m.group(2)
    if unit is None:
        raise ValueError(f"missing unit for {dimension} value {text!r}")
    if unit not in UNITS:
        raise ValueError(f"unknown unit {unit!r} in {text!r}")
    dim, factor = UNITS[unit]
    if dim != dimension:
        raise ValueError(f"{text!r} has dimension {dim}, expected {dimension}")
    if unit == "dBm":
        return 10.0 ** (value / 10.0) / 1000.0
    return value * factor


def _infinite(text) -> bool:
    return isinstance(text, str) and text.strip().lower() in ("inf", "infinite", "unlimited")


# ---------------------------------------------------------------- schema


@dataclass
class TopologyConfig:
    area_w: float = 2000.0
    area_h: float = 2000.0
    blocks: int = 10
    clients_per_block: int = 4
    seed: int = 1
    file: str | None = None


@dataclass
class RadioConfig:
    power: float = 0.1
    bandwidth: float = 1e7
    rate: float | None = 50e6  # target Shannon rate; sets N0 when noise_psd is absent
    noise_psd: float | None = None
    beta0: float = 1e-3
    altitude: float = 1000.0
    model_size: float = 8e8


@dataclass
class TransporterConfig:
    speed: float = 10.0
    budget: float = 15e3
    slf_power: float = 30.0
    parasitic_share: float = 0.5
    hover_power: float = 20.0


@dataclass
class CarpConfig:
    cost: str = "auto"  # auto | min_max | sws | shortest_total
    iterations: int = 1200
    q0: float = 1.0
    q_final: float = 1e-2
    tsp: str = "2opt"
    restarts: int = 10


@dataclass
class TaskConfig:
    kind: str = "quadratic"
    dim: int = 20
    samples: int = 800
    classes: int = 10
    sigma: float = 1.0
    clip: float = 5.0
    sv_low: float = 0.5
    sv_high: float = 1.0
    reg: float = 1e-2
    batch: int = 8
    partition: str = "iid"
    alpha: float = 0.3
    p_main: float = 0.7
    seed: int = 0


@dataclass
class SimConfig:
    modes: list[str] = field(default_factory=lambda: ["sync", "async"])
    horizon: int = 2000
    eta: float | None = None  # None: sqrt(N)/(L sqrt(T)), capped at 1/L
    aligned_check: bool = True


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 0
    replications: int = 4
    slot: float = 60.0
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    radio: RadioConfig = field(default_factory=RadioConfig)
    transporters: list[TransporterConfig] = field(default_factory=lambda: [TransporterConfig() for _ in range(4)])
    carp: CarpConfig = field(default_factory=CarpConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    source_text: str = ""

    @property
    def n_clients(self) -> int:
        return self.topology.blocks * self.topology.clients_per_block

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source_text")
        return d

    def with_seed(self, seed: int) -> "ScenarioConfig":
        out = copy.deepcopy(self)
        out.seed = int(seed)
        return out

    def with_budget(self, budget: float) -> "ScenarioConfig":
        out = copy.deepcopy(self)
        for t in out.transporters:
            t.budget = float(budget)
        return out


# field -> dimension for quantities; "int", "float", "str", "bool" for plain values
_SPEC = {
    "topology": {
        "area": "area", "blocks": "int", "clients_per_block": "int", "seed": "int", "file": "str",
    },
    "radio": {
        "power": "power", "bandwidth": "frequency", "rate": "rate", "noise_psd": "float", "beta0": "float",
        "altitude": "length", "model_size": "size",
    },
    "transporter": {
        "speed": "speed", "budget": "budget", "slf_power": "power", "parasitic_share": "float",
        "hover_power": "power",
    },
    "carp": {
        "cost": "str", "iterations": "int", "q0": "float", "q_final": "float", "tsp": "str", "restarts": "int",
    },
    "task": {
        "kind": "str", "dim": "int", "samples": "int", "classes": "int", "sigma": "float", "clip": "float",
        "sv_range": "pair", "reg": "float", "batch": "int", "partition": "str", "alpha": "float",
        "p_main": "float", "seed": "int",
    },
    "sim": {"modes": "modes", "horizon": "int", "eta": "eta", "aligned_check": "bool"},
}
_TOP = {"name", "seed", "replications", "slot", "topology", "radio", "transporters", "carp", "task", "sim"}
_CHOICES = {
    ("carp", "cost"): {"auto", "min_max", "sws", "shortest_total"},
    ("carp", "tsp"): {"2opt", "exact"},
    ("task", "kind"): {"quadratic", "logistic"},
    ("task", "partition"): {"iid", "dirichlet", "location"},
}


def _lines(node, path=(), out=None) -> dict:
    """Map key paths to source lines (1-based) by walking the composed YAML tree."""
    out = {} if out is None else out
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = path + (k.value,)
            out[key] = k.start_mark.line + 1
            _lines(v, key, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            out[path + (i,)] = v.start_mark.line + 1
            _lines(v, path + (i,), out)
    return out


class _Reader:
    def __init__(self, lines: dict, source: str):
        self.lines = lines
        self.source = source

    def fail(self, path, message):
        p = tuple(path)
        while p and p not in self.lines:
            p = p[:-1]
        raise ConfigError(message, self.lines.get(p), self.source)

    def mapping(self, value, path, allowed):
        if value is None:
            return {}
        if not isinstance(value, dict):
            self.fail(path, f"{'.'.join(map(str, path)) or 'config'} must be a mapping")
        for k in value:
            if k not in allowed:
                self.fail(tuple(path) + (k,), f"unknown key {k!r}" + (f" in {'.'.join(map(str, path))}" if path else ""))
        return value

    def value(self, raw, kind, path):
        name = ".".join(map(str, path))
        try:
            if kind == "int":
                if isinstance(raw, bool) or not isinstance(raw, int):
                    raise ValueError(f"expected an integer, got {raw!r}")
                return raw
            if kind == "float":
                if isinstance(raw, bool) or not isinstance(raw, (int, float)):
                    raise ValueError(f"expected a number, got {raw!r}")
                return float(raw)
            if kind == "str":
                if not isinstance(raw, str):
                    raise ValueError(f"expected a string, got {raw!r}")
                return raw
            if kind == "bool":
                if not isinstance(raw, bool):
                    raise ValueError(f"expected true/false, got {raw!r}")
                return raw
            if kind == "area":
                if not isinstance(raw, list) or len(raw) != 2:
                    raise ValueError("area must be [width, height]")
                return [parse_quantity(v, "length") for v in raw]
            if kind == "pair":
                if not isinstance(raw, list) or len(raw) != 2:
                    raise ValueError("expected [low, high]")
                return [self.value(v, "float", path) for v in raw]
            if kind == "budget":
                return math.inf if _infinite(raw) else parse_quantity(raw, "energy")
            if kind == "modes":
                modes = [raw] if isinstance(raw, str) else raw
                if not isinstance(modes, list) or not modes or any(m not in ("sync", "async") for m in modes):
                    raise ValueError(f"modes must be sync, async or a list of them, got {raw!r}")
                return list(modes)
            if kind == "eta":
                if raw == "auto":
                    return None
                return self.value(raw, "float", path)
            return parse_quantity(raw, kind)
        except ConfigError:
            raise
        except ValueError as e:
            self.fail(path, f"{name}: {e}")


def _apply(reader: _Reader, target, raw: dict, section: str, path):
    spec = _SPEC[section]
    raw = reader.mapping(raw, path, spec)
    for key, kind in spec.items():
        if key not in raw:
            continue
        v = reader.value(raw[key], kind, tuple(path) + (key,))
        p = tuple(path) + (key,)
        if (section, key) in _CHOICES and v not in _CHOICES[(section, key)]:
            reader.fail(p, f"{'.'.join(map(str, p))} must be one of {sorted(_CHOICES[(section, key)])}, got {v!r}")
        if key == "area":
            target.area_w, target.area_h = v
        elif key == "sv_range":
            target.sv_low, target.sv_high = v
        else:
            setattr(target, key, v)


def parse_config(text: str, source: str = "<config>") -> ScenarioConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(e, 'problem', e)}", mark.line + 1 if mark else None, source)
    if node is None:
        raise ConfigError("empty configuration", 1, source)
    reader = _Reader(_lines(node), source)
    data = reader.mapping(data, (), _TOP)
    cfg = ScenarioConfig(source_text=text)
    if "name" in data:
        cfg.name = reader.value(data["name"], "str", ("name",))
    if "seed" in data:
        cfg.seed = reader.value(data["seed"], "int", ("seed",))
    if "replications" in data:
        cfg.replications = reader.value(data["replications"], "int", ("replications",))
    if "slot" in data:
        cfg.slot = reader.value(data["slot"], "time", ("slot",))
    _apply(reader, cfg.topology, data.get("topology"), "topology", ("topology",))
    _apply(reader, cfg.radio, data.get("radio"), "radio", ("radio",))
    _apply(reader, cfg.carp, data.get("carp"), "carp", ("carp",))
    _apply(reader, cfg.task, data.get("task"), "task", ("task",))
    _apply(reader, cfg.sim, data.get("sim"), "sim", ("sim",))

    # transporters: {count, <defaults>, overrides: [..]} applied per transporter
    tr = reader.mapping(data.get("transporters"), ("transporters",), set(_SPEC["transporter"]) | {"count", "overrides"})
    count = reader.value(tr["count"], "int", ("transporters", "count")) if "count" in tr else 4
    if count < 1:
        reader.fail(("transporters", "count"), "transporters.count must be >= 1")
    base = TransporterConfig()
    _apply(reader, base, {k: v for k, v in tr.items() if k not in ("count", "overrides")}, "transporter", ("transporters",))
    cfg.transporters = [copy.deepcopy(base) for _ in range(count)]
    overrides = tr.get("overrides") or []
    if not isinstance(overrides, list) or len(overrides) > count:
        reader.fail(("transporters", "overrides"), "overrides must be a list with at most one entry per transporter")
    for k, ov in enumerate(overrides):
        _apply(reader, cfg.transporters[k], ov, "transporter", ("transporters", "overrides", k))

    _validate(cfg, reader)
    return cfg


def _validate(cfg: ScenarioConfig, reader: _Reader) -> None:
    checks = [
        (cfg.replications >= 1, ("replications",), "replications must be >= 1"),
        (cfg.slot > 0, ("slot",), "slot must be positive"),
        (cfg.topology.blocks >= 1 and cfg.topology.clients_per_block >= 1, ("topology",), "need at least one client"),
        (cfg.n_clients >= len(cfg.transporters), ("transporters", "count"), "more transporters than clients"),
        (cfg.sim.horizon >= 2, ("sim", "horizon"), "horizon must be >= 2 slots"),
        (cfg.sim.eta is None or cfg.sim.eta > 0, ("sim", "eta"), "eta must be positive"),
        (cfg.carp.iterations >= 0, ("carp", "iterations"), "iterations must be >= 0"),
        (cfg.carp.q0 > 0 and cfg.carp.q_final > 0, ("carp",), "temperatures must be positive"),
        (cfg.carp.restarts >= 1, ("carp", "restarts"), "restarts must be >= 1"),
        (cfg.task.dim >= 1 and cfg.task.samples >= cfg.n_clients, ("task",), "need dim >= 1 and a sample per client"),
        (cfg.task.clip > 0, ("task", "clip"), "clip must be positive"),
        (cfg.task.sigma >= 0, ("task", "sigma"), "sigma must be >= 0"),
        (0 < cfg.task.sv_low <= cfg.task.sv_high, ("task", "sv_range"), "sv_range must satisfy 0 < low <= high"),
        (cfg.radio.rate is not None or cfg.radio.noise_psd is not None, ("radio",), "give radio.rate or radio.noise_psd"),
    ]
    for ok, path, msg in checks:
        if not ok:
            reader.fail(path, msg)
    for k, t in enumerate(cfg.transporters):
        if not (t.speed > 0 and t.budget > 0 and 0 < t.parasitic_share < 1):
            reader.fail(("transporters",), f"transporter {k}: speed and budget must be positive, share in (0, 1)")


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def bundled_config(name: str) -> ScenarioConfig:
    """One of the configs shipped with the package, e.g. ``paper_default`` or ``tiny``."""
    res = resources.files("fedex_sim") / "configs" / f"{name}.yaml"
    if not res.is_file():
        raise ConfigError(f"no bundled config named {name!r}")
    return parse_config(res.read_text(), f"{name}.yaml")


def resolve_config(ref: str | Path) -> ScenarioConfig:
    """A file path, or the name of a bundled config."""
    p = Path(ref)
    if p.exists():
        return load_config(p)
    return bundled_config(str(ref))
