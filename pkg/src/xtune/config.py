"""Scenario configuration and its INI file format.

A config file has the sections ``[scenario]``, ``[dlc]``, ``[model]``,
``[plant]``, ``[nmpc]`` and ``[tuner]``. Every key is optional; missing keys
take the defaults of the dataclasses below, which match the shipped
``default.ini``. Tuples are comma separated; ``inf`` and ``-inf`` are allowed.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .dynamics import RANDOMIZED, PlantConfig, SingleTrackParams
from .nmpc import WEIGHT_NAMES, OcpConfig
from .path import DlcGeometry

TUNER_KINDS = ("none", "ukf", "spsa", "ukf_spsa")
ENERGY_GATES = ("simulated", "window", "off")
SEED_ENV = "XTUNE_SEED"


class ConfigError(ValueError):
    pass


def default_model_params() -> SingleTrackParams:
    # the prediction model underestimates driving resistance
    return SingleTrackParams(F_max=2000.0, c_r0=100.0, c_r2=0.3)


def default_plant() -> PlantConfig:
    return PlantConfig(
        nominal=SingleTrackParams(M=1650.0, I_z=2750.0, F_max=2000.0, c_r0=500.0, c_r2=1.0),
        tire_model="nonlinear", tire_B=(6.0, 6.0), tire_C=(1.9, 1.9), tire_D=(8000.0, 8000.0),
        tau_delta=0.08, tau_tr=0.2,
        randomization={name: 0.05 for name in RANDOMIZED},
        process_noise_std=(0.0, 0.0, 0.0, 0.002, 0.002, 0.0005),
    )


@dataclass(frozen=True)
class TunerConfig:
    kind: str = "none"
    params: tuple = ("q_vx", "q_w")
    low: float = 0.1
    high: float = 100.0
    lam: float = 1.0
    p0: float = 1.0
    c_theta_std: float = 0.5
    cn0: float = 1.0
    gamma: float = 0.3
    j_threshold: float | None = None
    spsa_a: float = 0.05
    spsa_c: float = 0.1
    spsa_magnitudes: tuple = (1.0, 2.0)
    spsa_pairs: int | None = None       # None -> p pairs (2p simulations)
    spsa_normalize: bool = False
    energy_gate: str = "simulated"
    energy_floor: float = 1e-6
    common_random_numbers: bool = True
    randomize: bool = True

    def __post_init__(self):
        if self.kind not in TUNER_KINDS:
            raise ConfigError(f"unknown tuner kind {self.kind!r}; expected one of {TUNER_KINDS}")
        if not self.params:
            raise ConfigError("at least one tuned parameter is required")
        bad = [n for n in self.params if n not in WEIGHT_NAMES]
        if bad:
            raise ConfigError(f"unknown weight names {bad}")
        if len(set(self.params)) != len(self.params):
            raise ConfigError("tuned parameters must be distinct")
        if not 0 < self.low <= 1.0 <= self.high:
            raise ConfigError("bounds must satisfy 0 < low <= 1 <= high (unit start)")
        if self.p + self.lam <= 0:
            raise ConfigError("p + lambda must be positive")
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.energy_gate not in ENERGY_GATES:
            raise ConfigError(f"energy_gate must be one of {ENERGY_GATES}")
        if self.spsa_c <= 0 or self.spsa_a < 0:
            raise ConfigError("spsa_c must be positive and spsa_a non-negative")
        if self.spsa_pairs is not None and self.spsa_pairs < 1:
            raise ConfigError("spsa_pairs must be >= 1")
        if self.j_threshold is not None and self.j_threshold < 0:
            raise ConfigError("j_threshold must be non-negative")

    @property
    def p(self) -> int:
        return len(self.params)

    @property
    def num_pairs(self) -> int:
        return self.p if self.spsa_pairs is None else self.spsa_pairs


@dataclass(frozen=True)
class ScenarioConfig:
    dlc: DlcGeometry = field(default_factory=DlcGeometry)
    Ts: float = 0.04
    N_H: int = 30
    window_seconds: float = 3.0
    snr_db: float = math.inf
    seed: int = 0
    sample_spacing: float = 0.25
    plant: PlantConfig = field(default_factory=default_plant)
    model: SingleTrackParams = field(default_factory=default_model_params)
    nmpc: OcpConfig = field(default_factory=OcpConfig)
    tuner: TunerConfig = field(default_factory=TunerConfig)

    def __post_init__(self):
        if not self.Ts > 0:
            raise ConfigError("Ts must be positive")
        n = self.window_seconds / self.Ts
        if abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise ConfigError(f"window_seconds / Ts = {n} is not a positive integer")
        if math.isnan(self.snr_db):
            raise ConfigError("snr_db must not be NaN")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        try:
            self.dlc.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        # the controller's own copy of Ts / N_H follows the scenario
        if self.nmpc.Ts != self.Ts or self.nmpc.N_H != self.N_H:
            object.__setattr__(self, "nmpc", self.nmpc.replace(Ts=self.Ts, N_H=self.N_H))

    @property
    def N(self) -> int:
        return int(round(self.window_seconds / self.Ts))

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)

    def with_tuner(self, **kw) -> "ScenarioConfig":
        return self.replace(tuner=dataclasses.replace(self.tuner, **kw))


# -- INI parsing ----------------------------------------------------------------

def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(";", ",").split(",") if t.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text: str):
    t = text.strip().lower()
    return None if t in ("", "none", "off") else float(t)


def _optional_int(text: str):
    t = text.strip().lower()
    return None if t in ("", "none", "auto") else int(t)


_PARAM_KEYS = {f.name: float for f in dataclasses.fields(SingleTrackParams)}

_SCENARIO_KEYS = {"Ts": float, "N_H": int, "window_seconds": float, "snr_db": float,
                  "seed": int, "sample_spacing": float}
_DLC_KEYS = {"section_lengths": _floats, "lane_offset": float, "entry_speed_kph": float,
             "repeats": int, "w_l": float, "w_r": float}
_PLANT_KEYS = {"tire_model": str, "tire_B": _floats, "tire_C": _floats, "tire_D": _floats,
               "tau_delta": float, "tau_tr": float, "process_noise_std": _floats,
               "substeps": int, **{f"randomize_{n}": float for n in RANDOMIZED}}
_NMPC_KEYS = {"x_min": _floats, "x_max": _floats, "track_limits": _bool, "u_min": _floats,
              "u_max": _floats, "udot_min": _floats, "udot_max": _floats,
              "terminal_scale": float, "rate_cost_per_sample": lambda t: tuple(
                  _bool(x) for x in t.split(",")),
              "sqp_max_iters": int, "sqp_tol": float, "qp_tol": float, "step_cap": float,
              "fd_step": float, "max_failures": int}
_TUNER_KEYS = {"kind": str, "params": lambda t: tuple(x.strip() for x in t.split(",") if x.strip()),
               "low": float, "high": float, "lam": float, "p0": float, "c_theta_std": float,
               "cn0": float, "gamma": float, "j_threshold": _optional_float, "spsa_a": float,
               "spsa_c": float, "spsa_magnitudes": _floats, "spsa_pairs": _optional_int,
               "spsa_normalize": _bool, "energy_gate": str, "energy_floor": float,
               "common_random_numbers": _bool, "randomize": _bool}

_SECTIONS = {"scenario": _SCENARIO_KEYS, "dlc": _DLC_KEYS, "model": _PARAM_KEYS,
             "plant": {**_PARAM_KEYS, **_PLANT_KEYS}, "nmpc": _NMPC_KEYS, "tuner": _TUNER_KEYS}


def _read_section(parser, name):
    if not parser.has_section(name):
        return {}
    schema = _SECTIONS[name]
    out = {}
    for key, raw in parser.items(name):
        if key not in schema:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        try:
            out[key] = schema[key](raw)
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from exc
    return out


def parse_config(text: str, base: ScenarioConfig | None = None) -> ScenarioConfig:
    """Parse INI text on top of ``base`` (defaults when omitted)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str   # keys are case-sensitive (Ts, N_H, M, ...)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    cfg = base or ScenarioConfig()
    try:
        sc = _read_section(parser, "scenario")
        dlc_kw = _read_section(parser, "dlc")
        if "entry_speed_kph" in dlc_kw:
            dlc_kw["entry_speed"] = dlc_kw.pop("entry_speed_kph") / 3.6
        dlc = dataclasses.replace(cfg.dlc, **dlc_kw)
        model = cfg.model.replace(**_read_section(parser, "model"))
        plant_kw = _read_section(parser, "plant")
        nominal = cfg.plant.nominal.replace(**{k: plant_kw.pop(k) for k in list(plant_kw)
                                               if k in _PARAM_KEYS})
        rand = dict(cfg.plant.randomization)
        for k in list(plant_kw):
            if k.startswith("randomize_"):
                rand[k[len("randomize_"):]] = plant_kw.pop(k)
        rand = {k: v for k, v in rand.items() if v > 0}
        plant = cfg.plant.replace(nominal=nominal, randomization=rand, **plant_kw)
        nmpc = cfg.nmpc.replace(**_read_section(parser, "nmpc"))
        tuner = dataclasses.replace(cfg.tuner, **_read_section(parser, "tuner"))
        return cfg.replace(dlc=dlc, model=model, plant=plant, nmpc=nmpc, tuner=tuner, **sc)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def default_config_text() -> str:
    return resources.files("xtune").joinpath("default.ini").read_text()


def load_config(path=None, env=None) -> ScenarioConfig:
    """Load a config file (the shipped default when ``path`` is None).

    The ``XTUNE_SEED`` environment variable overrides the seed.
    """
    if path is None:
        text = default_config_text()
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
    cfg = parse_config(text)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg = cfg.replace(seed=int(env[SEED_ENV]))
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    return cfg
