"""Experiment configuration: an INI file with one section per stage.

Every optional value may be given as ``auto``; ``resolve`` replaces those
with concrete numbers once the data they depend on exist, and the resolved
configuration is echoed into the run summary.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .errors import DomainError
from .systems import KINDS, SystemSpec

__all__ = ["ExperimentConfig", "load_config", "dump_config", "DEFAULTS"]

# section -> key -> default (None means "auto")
DEFAULTS = {
    "system": {"kind": "PlanarCycle", "ambient_dim": 32, "lift_seed": 0},
    "sampling": {"n": 200, "burn_in": 50.0, "thin": 0.01, "seed": 0},
    "embedding": {"m": 7, "gamma": None, "retries": 20, "delta_L": None, "C_max": 1000.0},
    "dimension": {"max_pairs": 20000},
    "extension": {"C0_policy": "fitted", "kind": "midrange"},
    "lyapunov": {
        "eps": 0.05,
        "delta": None,
        "beta": None,
        "g_min": None,
        "ladder_steps": 8,
        "shell_samples": 4096,
    },
    "harness": {
        "B_radius": 3.0,
        "n_traj": 64,
        "horizon": 50.0,
        "settle": 25.0,
        "tol": 1e-6,
        "settle_tol": None,
        "n_repro": 16,
        "T_repro": 10.0,
        "n_unique": 16,
        "T_unique": 2.0,
        "r0": 1e-8,
        "unique_tol": 1e-10,
    },
    "output": {"directory": "attrakt-run"},
}

_INT_KEYS = {"ambient_dim", "lift_seed", "n", "seed", "m", "retries", "max_pairs", "ladder_steps",
             "shell_samples", "n_traj", "n_repro", "n_unique"}
_STR_KEYS = {"kind", "C0_policy", "directory"}


def _parse(key: str, raw: str):
    raw = raw.strip()
    if raw.lower() in ("auto", ""):
        return None
    if key in _STR_KEYS:
        return raw
    try:
        return int(raw) if key in _INT_KEYS else float(raw)
    except ValueError as exc:
        raise DomainError(f"bad value for {key}: {raw!r}") from exc


@dataclass
class ExperimentConfig:
    system: dict = field(default_factory=lambda: dict(DEFAULTS["system"]))
    system_params: dict = field(default_factory=dict)
    sampling: dict = field(default_factory=lambda: dict(DEFAULTS["sampling"]))
    embedding: dict = field(default_factory=lambda: dict(DEFAULTS["embedding"]))
    dimension: dict = field(default_factory=lambda: dict(DEFAULTS["dimension"]))
    extension: dict = field(default_factory=lambda: dict(DEFAULTS["extension"]))
    lyapunov: dict = field(default_factory=lambda: dict(DEFAULTS["lyapunov"]))
    harness: dict = field(default_factory=lambda: dict(DEFAULTS["harness"]))
    output: dict = field(default_factory=lambda: dict(DEFAULTS["output"]))

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.system["kind"] not in KINDS:
            raise DomainError(f"unknown system kind {self.system['kind']!r}")
        if self.extension["C0_policy"] not in ("fitted", "theory"):
            raise DomainError("C0_policy must be 'fitted' or 'theory'")
        if self.extension["kind"] not in ("mcshane", "midrange"):
            raise DomainError("extension kind must be 'mcshane' or 'midrange'")
        if self.sampling["n"] < 1:
            raise DomainError("sampling n must be positive")
        h = self.harness
        if not 0 <= h["settle"] < h["horizon"]:
            raise DomainError("harness settle must lie in [0, horizon)")
        if h["tol"] <= 0:
            raise DomainError("harness tol must be positive")
        if self.lyapunov["eps"] <= 0:
            raise DomainError("eps must be positive")

    def spec(self) -> SystemSpec:
        return SystemSpec(
            kind=self.system["kind"],
            params=dict(self.system_params),
            ambient_dim=int(self.system["ambient_dim"]),
            lift_seed=int(self.system["lift_seed"]),
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        out = ExperimentConfig(**{k: dict(v) for k, v in asdict(self).items()})
        out.sampling["seed"] = int(seed)
        return out

    def as_dict(self) -> dict:
        return asdict(self)


def load_config(path=None, text: Optional[str] = None) -> ExperimentConfig:
    """Read an INI file (or string); unknown sections or keys are errors."""
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case sensitive (C0_policy, delta_L, B_radius)
    if text is not None:
        parser.read_string(text)
    elif path is not None:
        if not Path(path).exists():
            raise DomainError(f"config file {path} not found")
        parser.read(path)
    cfg = ExperimentConfig()
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "system":
            for key, raw in items.items():
                if key in DEFAULTS["system"]:
                    cfg.system[key] = _parse(key, raw) if key != "kind" else raw.strip()
                else:
                    cfg.system_params[key] = float(raw)
            continue
        if section not in DEFAULTS:
            raise DomainError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        for key, raw in items.items():
            if key not in DEFAULTS[section]:
                raise DomainError(f"unknown key {key!r} in [{section}]")
            target[key] = _parse(key, raw)
    cfg.validate()
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section in DEFAULTS:
        values = dict(getattr(cfg, section))
        if section == "system":
            values.update(cfg.system_params)
        parser[section] = {k: ("auto" if v is None else repr(v) if isinstance(v, float) else str(v))
                           for k, v in values.items()}
    from io import StringIO

    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()
