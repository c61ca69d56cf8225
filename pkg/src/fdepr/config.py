"""Run configuration: TOML file with unit-suffixed physical values.

Every physical quantity is written as a string ``"<number> <unit>"`` (for
example ``"59.7 mT"`` or ``"1.45e6 /s"``) and converted to SI on load.
Frequencies given in Hz become angular frequencies (rad/s).  Unknown sections
and keys are rejected.
"""

from __future__ import annotations

import math
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    """Malformed, incomplete or inconsistent configuration."""


TWO_PI = 2 * math.pi

# unit -> (dimension, factor to SI)
_UNITS: dict[str, tuple[str, float]] = {
    "Hz": ("frequency", 1.0), "kHz": ("frequency", 1e3), "MHz": ("frequency", 1e6), "GHz": ("frequency", 1e9),
    "rad/s": ("angular", 1.0), "krad/s": ("angular", 1e3), "Mrad/s": ("angular", 1e6),
    "/s": ("rate", 1.0), "1/s": ("rate", 1.0), "s^-1": ("rate", 1.0), "/ms": ("rate", 1e3), "/us": ("rate", 1e6),
    "T": ("field", 1.0), "mT": ("field", 1e-3), "uT": ("field", 1e-6), "µT": ("field", 1e-6),
    "s": ("time", 1.0), "ms": ("time", 1e-3), "us": ("time", 1e-6), "µs": ("time", 1e-6), "ns": ("time", 1e-9),
    "m": ("length", 1.0), "mm": ("length", 1e-3), "um": ("length", 1e-6), "µm": ("length", 1e-6),
    "nm": ("length", 1e-9), "A": ("length", 1e-10), "Å": ("length", 1e-10),
    "deg": ("angle", 1.0), "rad": ("angle", 180.0 / math.pi),
    "W": ("power", 1.0), "mW": ("power", 1e-3), "uW": ("power", 1e-6), "nW": ("power", 1e-9),
    "pW": ("power", 1e-12), "dBm": ("dbm", 1.0),
    "dB": ("db", 1.0),
    "/m3": ("concentration", 1.0), "/m^3": ("concentration", 1.0), "m^-3": ("concentration", 1.0),
    "/cm3": ("concentration", 1e6), "/cm^3": ("concentration", 1e6), "cm^-3": ("concentration", 1e6),
    "ns^-1/2": ("beta", 1.0), "ns^1/2": ("epsilon", 1.0),
    "ohm": ("impedance", 1.0), "Ohm": ("impedance", 1.0), "Ω": ("impedance", 1.0),
}

# value kinds accepted per schema kind; "angular" also takes plain frequencies (x 2 pi)
_ACCEPTS = {
    "angular": ("angular", "frequency"),
    "rate": ("rate",),
    "field": ("field",),
    "time": ("time",),
    "length": ("length",),
    "angle": ("angle",),
    "power": ("power", "dbm"),
    "db": ("db",),
    "concentration": ("concentration",),
    "beta": ("beta",),
    "epsilon": ("epsilon",),
    "impedance": ("impedance",),
}

_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(\S+)\s*$")


def parse_quantity(text: Any, kind: str, where: str = "value") -> float:
    """Convert ``"<number> <unit>"`` to SI for schema ``kind``.

    Angles come back in degrees, attenuations in dB, powers in W.
    """
    if not isinstance(text, str):
        raise ConfigError(f"{where}: physical value {text!r} needs a unit suffix, e.g. \"1.0 {_example(kind)}\"")
    m = _QUANTITY.match(text)
    if not m:
        raise ConfigError(f"{where}: cannot parse {text!r} as '<number> <unit>'")
    number, unit = float(m.group(1)), m.group(2)
    if unit not in _UNITS:
        raise ConfigError(f"{where}: unknown unit {unit!r}")
    dim, factor = _UNITS[unit]
    if dim not in _ACCEPTS[kind]:
        raise ConfigError(f"{where}: unit {unit!r} is a {dim}, expected a {kind}")
    if dim == "frequency" and kind == "angular":
        return number * factor * TWO_PI
    if dim == "dbm":
        return 1e-3 * 10 ** (number / 10)
    return number * factor


def _example(kind: str) -> str:
    for unit, (dim, _) in _UNITS.items():
        if dim in _ACCEPTS.get(kind, ()):
            return unit
    return ""


# --------------------------------------------------------------------------
# schema: section -> key -> (kind, default); None means unset

_SPECIES_KEYS = {
    "name": ("str", None),
    "doublet": ("str", None),
    "concentration": ("concentration", 0.0),
    "linewidth": ("angular", None),
    "line_shape": ("str", "lorentzian"),
    "gamma_nr": ("rate", None),
    "gamma_phi": ("rate", 0.0),
}

SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "species": {**_SPECIES_KEYS, "extra": ("species_list", ())},
    "resonator": {
        "frequency": ("angular", None),
        "kappa_c": ("rate", None),
        "kappa_i": ("rate", None),
        "impedance": ("impedance", 35.0),
        "wire_width": ("length", 2e-6),
        "wire_length": ("length", 630e-6),
        "wire_angle": ("angle", 51.0),
        "current_profile": ("str", "uniform"),
        "grid_extent": ("length", 500e-6),
        "fine_step": ("length", 10e-9),
    },
    "pulse": {
        "beta": ("beta", None),
        "epsilon": ("epsilon", None),
        "input_power": ("power", None),
        "attenuation": ("db", None),
        "duration": ("time", None),
        "detuning": ("angular", 0.0),
        "epsilons": ("epsilon_list", None),
        "durations": ("time_grid", None),
    },
    "counter": {
        "cycle": ("time", 12e-6),
        "dark_rate": ("rate", 0.0),
        "dead_time": ("time", 50e-6),
        "t_rep": ("time", 1.0),
        "t_int": ("time", None),
        "n_sequences": ("int", 0),
        "t_bin": ("time", None),
        "eta": ("float", 1.0),
    },
    "simulation": {
        "seed": ("int", None),
        "phi": ("angle", 0.0),
        "theta_c": ("angle", 0.0),
        "field": ("field", None),
        "field_grid": ("field_grid", None),
        "phi_grid": ("angle_grid", None),
        "search_min": ("field", 1e-4),
        "search_max": ("field", 1.0),
        "search_step": ("field", 5e-5),
        "min_matrix_element": ("float", 0.05),
        "transition": ("int", 0),
        "coupling_model": ("str", "map"),
        "coupling_bins": ("int", 60),
        "g_min": ("angular", None),
        "g_max": ("angular", None),
        "detuning_bins": ("int", 41),
        "detuning_span": ("float", 3.0),
        "init": ("str", "saturated"),
        "method": ("str", "auto"),
        "t_end": ("time", None),
        "n_points": ("int", 4000),
        "background_subtract": ("bool", False),
        "click_noise": ("bool", False),
        "n_spins": ("int", None),
        "workers": ("int", 1),
        "rabi_noise": ("bool", False),
        "rabi_points": ("int", 200),
        "rabi_min_f": ("float", 10.0),
        "bath_sites": ("int", 15),
        "bath_abundance": ("float", 0.14),
        "bath_max_occupied": ("int", 3),
        "rabi_frequency": ("angular", None),
        "rabi_t_end": ("time", 20e-6),
        "cavity_detunings": ("int", 1),
        "nuclear_larmor": ("angular", 0.0),
        "fit_model": ("str", None),
        "fit_input": ("str", None),
        "x_column": ("str", None),
        "y_column": ("str", None),
        "fit_weights": ("str", None),
        "fit_window": ("time_grid", None),
        "field_slope": ("float", None),
        "fit_period": ("float", None),
    },
    "output": {
        "directory": ("str", "."),
        "prefix": ("str", None),
        "write_clicks": ("bool", True),
    },
}


def _parse_grid(value: Any, kind: str, where: str) -> np.ndarray:
    """A list of quantities or a table {start, stop, step | num, spacing}."""
    if isinstance(value, list):
        if not value:
            raise ConfigError(f"{where}: empty list")
        return np.array([parse_quantity(v, kind, f"{where}[{i}]") for i, v in enumerate(value)])
    if not isinstance(value, dict):
        raise ConfigError(f"{where}: expected a list or a {{start, stop, step}} table")
    allowed = {"start", "stop", "step", "num", "spacing"}
    unknown = set(value) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        start = parse_quantity(value["start"], kind, f"{where}.start")
        stop = parse_quantity(value["stop"], kind, f"{where}.stop")
    except KeyError as exc:
        raise ConfigError(f"{where}: missing {exc.args[0]!r}") from None
    spacing = value.get("spacing", "linear")
    if spacing not in ("linear", "log"):
        raise ConfigError(f"{where}: spacing must be 'linear' or 'log'")
    if ("step" in value) == ("num" in value):
        raise ConfigError(f"{where}: give exactly one of 'step' and 'num'")
    if "num" in value:
        num = value["num"]
        if not isinstance(num, int) or num < 1:
            raise ConfigError(f"{where}.num must be a positive integer")
        if spacing == "log":
            if start <= 0 or stop <= 0:
                raise ConfigError(f"{where}: log spacing needs positive bounds")
            return np.geomspace(start, stop, num)
        return np.linspace(start, stop, num)
    if spacing == "log":
        raise ConfigError(f"{where}: log spacing needs 'num'")
    step = parse_quantity(value["step"], kind, f"{where}.step")
    if step <= 0 or stop < start:
        raise ConfigError(f"{where}: need step > 0 and stop >= start")
    n = int(math.floor((stop - start) / step * (1 + 1e-9))) + 1
    return start + step * np.arange(n)


def _parse_value(value: Any, kind: str, where: str) -> Any:
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true or false")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a plain number")
        return float(value)
    if kind.endswith("_grid"):
        return _parse_grid(value, kind[: -len("_grid")], where)
    if kind.endswith("_list"):
        base = kind[: -len("_list")]
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{where}: expected a non-empty list")
        if base == "species":
            return tuple(_parse_section(v, _SPECIES_KEYS, f"{where}[{i}]") for i, v in enumerate(value))
        return np.array([parse_quantity(v, base, f"{where}[{i}]") for i, v in enumerate(value)])
    return parse_quantity(value, kind, where)


def _parse_section(raw: Any, schema: dict, where: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"[{where}] must be a table")
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"[{where}]: unknown key(s) {', '.join(unknown)}")
    out = {}
    for key, (kind, default) in schema.items():
        if key in raw:
            out[key] = _parse_value(raw[key], kind, f"{where}.{key}")
        else:
            out[key] = default
    return out


@dataclass
class RunConfig:
    species: dict
    resonator: dict
    pulse: dict
    counter: dict
    simulation: dict
    output: dict
    raw: dict
    source: str | None = None

    def require(self, section: str, *keys: str) -> None:
        sec = getattr(self, section)
        missing = [k for k in keys if sec.get(k) is None]
        if missing:
            raise ConfigError(f"[{section}] is missing required key(s): {', '.join(missing)}")

    def resolved(self) -> dict:
        """All parsed values in SI units (rad/s for angular frequencies), JSON-friendly."""
        out = {}
        for sec in SCHEMA:
            out[sec] = {k: _jsonable(v) for k, v in getattr(self, sec).items()}
        return out


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def parse_config(data: dict, source: str | None = None) -> RunConfig:
    unknown = sorted(set(data) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    parsed = {sec: _parse_section(data.get(sec, {}), keys, sec) for sec, keys in SCHEMA.items()}
    cfg = RunConfig(**parsed, raw=data, source=source)
    _check(cfg)
    return cfg


def loads(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    return parse_config(data)


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    cfg = loads(text)
    cfg.source = str(path)
    return cfg


def _check(cfg: RunConfig) -> None:
    p = cfg.pulse
    if p["beta"] is not None and p["epsilon"] is not None:
        raise ConfigError("[pulse]: give either beta or epsilon, not both")
    if (p["input_power"] is None) != (p["attenuation"] is None):
        raise ConfigError("[pulse]: input_power and attenuation go together")
    if p["input_power"] is not None and (p["beta"] is not None or p["epsilon"] is not None):
        raise ConfigError("[pulse]: input_power/attenuation replace beta and epsilon")
    if not 0.0 <= cfg.counter["eta"] <= 1.0:
        raise ConfigError("[counter].eta must lie in [0, 1]")
    s = cfg.simulation
    if s["coupling_model"] not in ("map", "thin_wire"):
        raise ConfigError("[simulation].coupling_model must be 'map' or 'thin_wire'")
    if s["init"] not in ("saturated", "periodic"):
        raise ConfigError("[simulation].init must be 'saturated' or 'periodic'")
    if s["method"] not in ("auto", "rk4", "closed"):
        raise ConfigError("[simulation].method must be 'auto', 'rk4' or 'closed'")
    for entry in (cfg.species, *cfg.species["extra"]):
        if entry["line_shape"] not in ("lorentzian", "gaussian", "delta"):
            raise ConfigError("[species].line_shape must be 'lorentzian', 'gaussian' or 'delta'")
        if entry["concentration"] < 0:
            raise ConfigError("[species].concentration must be non-negative")
