"""Run configuration: schema, YAML loading, and the provenance hash.

A run file is a single YAML document; every key is validated here and
reported by its dotted path on failure, so a batch user sees exactly
which line to fix. The hash embedded in output files is taken over the
resolved configuration (defaults filled in, sweeps expanded), meaning
two files that request the same work share a hash regardless of
formatting.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import yaml

from .exceptions import ConfigError

SECTION_KINDS = ("periapse", "apoapse")

#: degree bounds accepted for the Taylor parameterization
DEGREE_MIN, DEGREE_MAX = 5, 40


@dataclass(frozen=True)
class ModelConfig:
    mu: float
    name: str = "crtbp"


@dataclass(frozen=True)
class ResonanceConfig:
    m: int
    n: int
    interior: bool
    #: starting apsis override; None picks periapse for interior
    #: resonances and apoapse for exterior ones. The override selects
    #: between the two symmetric families of one resonance.
    apsis: str | None = None


@dataclass(frozen=True)
class GridConfig:
    m_grid: int = 1000
    n_max: int = 8


@dataclass(frozen=True)
class ToleranceConfig:
    ode_abs: float = 1e-12
    ode_rel: float = 1e-12
    newton: float = 1e-12
    bisection: float = 1e-12


@dataclass(frozen=True)
class ConnectionConfig:
    #: scan the fundamental domains themselves as layer pair (0, 0)
    include_fundamental: bool = False


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    resonance: ResonanceConfig
    jacobi: tuple[float, ...]
    section: str = "periapse"
    degree: int = 20
    e_tol: float = 1e-6
    grid: GridConfig = field(default_factory=GridConfig)
    tolerances: ToleranceConfig = field(default_factory=ToleranceConfig)
    connections: ConnectionConfig = field(
        default_factory=ConnectionConfig)
    output_dir: str = "out"


def _require(mapping: dict, key: str, path: str):
    if key not in mapping:
        raise ConfigError(f"missing config key '{_join(path, key)}'")
    return mapping[key]


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _as_mapping(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"config key '{path}' must be a mapping")
    return value


def _as_float(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"config key '{path}' must be a number")
    out = float(value)
    if not math.isfinite(out):
        raise ConfigError(f"config key '{path}' must be finite")
    return out


def _as_positive(value, path: str) -> float:
    out = _as_float(value, path)
    if out <= 0.0:
        raise ConfigError(f"config key '{path}' must be positive")
    return out


def _as_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"config key '{path}' must be an integer")
    return int(value)


def _as_bool(value, path: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"config key '{path}' must be true or false")
    return value


def _as_str(value, path: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"config key '{path}' must be a string")
    return value


def _reject_unknown(mapping: dict, known: tuple[str, ...], path: str):
    for key in mapping:
        if key not in known:
            raise ConfigError(f"unknown config key '{_join(path, key)}'")


def _parse_model(raw, path: str) -> ModelConfig:
    raw = _as_mapping(raw, path)
    _reject_unknown(raw, ("mu", "name"), path)
    mu = _as_float(_require(raw, "mu", path), _join(path, "mu"))
    if not 0.0 <= mu < 1.0:
        raise ConfigError(f"config key '{_join(path, 'mu')}' must lie "
                          "in [0, 1)")
    name = _as_str(raw.get("name", "crtbp"), _join(path, "name"))
    return ModelConfig(mu=mu, name=name)


def _parse_resonance(raw, path: str) -> ResonanceConfig:
    raw = _as_mapping(raw, path)
    _reject_unknown(raw, ("m", "n", "interior", "apsis"), path)
    m = _as_int(_require(raw, "m", path), _join(path, "m"))
    n = _as_int(_require(raw, "n", path), _join(path, "n"))
    if m <= 0 or n <= 0 or math.gcd(m, n) != 1:
        raise ConfigError(f"config key '{path}' must give coprime "
                          "positive integers m, n")
    interior = _as_bool(_require(raw, "interior", path),
                        _join(path, "interior"))
    apsis = raw.get("apsis")
    if apsis is not None:
        apsis = _as_str(apsis, _join(path, "apsis"))
        if apsis not in SECTION_KINDS:
            raise ConfigError(f"config key '{_join(path, 'apsis')}' must "
                              f"be one of {SECTION_KINDS}")
    return ResonanceConfig(m=m, n=n, interior=interior, apsis=apsis)


def _parse_jacobi(raw, path: str) -> tuple[float, ...]:
    """A single value, or a sweep {from, to, step} expanded inclusively."""
    if isinstance(raw, dict):
        _reject_unknown(raw, ("from", "to", "step"), path)
        lo = _as_float(_require(raw, "from", path), _join(path, "from"))
        hi = _as_float(_require(raw, "to", path), _join(path, "to"))
        step = _as_positive(_require(raw, "step", path),
                            _join(path, "step"))
        if hi < lo:
            raise ConfigError(f"config key '{_join(path, 'to')}' must "
                              "not be below 'from'")
        count = int(math.floor((hi - lo) / step + 1e-9)) + 1
        return tuple(lo + i * step for i in range(count))
    return (_as_float(raw, path),)


def _parse_grid(raw, path: str) -> GridConfig:
    raw = _as_mapping(raw, path)
    _reject_unknown(raw, ("m_grid", "n_max"), path)
    m_grid = _as_int(raw.get("m_grid", 1000), _join(path, "m_grid"))
    n_max = _as_int(raw.get("n_max", 8), _join(path, "n_max"))
    if m_grid < 2:
        raise ConfigError(f"config key '{_join(path, 'm_grid')}' must "
                          "be at least 2")
    if n_max < 1:
        raise ConfigError(f"config key '{_join(path, 'n_max')}' must "
                          "be at least 1")
    return GridConfig(m_grid=m_grid, n_max=n_max)


def _parse_tolerances(raw, path: str) -> ToleranceConfig:
    raw = _as_mapping(raw, path)
    defaults = ToleranceConfig()
    _reject_unknown(raw, ("ode_abs", "ode_rel", "newton", "bisection"),
                    path)
    values = {
        key: _as_positive(raw.get(key, getattr(defaults, key)),
                          _join(path, key))
        for key in ("ode_abs", "ode_rel", "newton", "bisection")
    }
    return ToleranceConfig(**values)


def _parse_connections(raw, path: str) -> ConnectionConfig:
    raw = _as_mapping(raw, path)
    _reject_unknown(raw, ("include_fundamental",), path)
    include = _as_bool(raw.get("include_fundamental", False),
                       _join(path, "include_fundamental"))
    return ConnectionConfig(include_fundamental=include)


_TOP_KEYS = ("model", "section", "resonance", "jacobi", "degree",
             "e_tol", "grid", "tolerances", "connections", "output_dir")


def parse_config(raw: dict) -> RunConfig:
    """Validate a parsed YAML mapping into a RunConfig."""
    raw = _as_mapping(raw, "")
    _reject_unknown(raw, _TOP_KEYS, "")
    model = _parse_model(_require(raw, "model", ""), "model")
    resonance = _parse_resonance(_require(raw, "resonance", ""),
                                 "resonance")
    jacobi = _parse_jacobi(_require(raw, "jacobi", ""), "jacobi")
    section = _as_str(raw.get("section", "periapse"), "section")
    if section not in SECTION_KINDS:
        raise ConfigError(f"config key 'section' must be one of "
                          f"{SECTION_KINDS}")
    degree = _as_int(raw.get("degree", 20), "degree")
    if not DEGREE_MIN <= degree <= DEGREE_MAX:
        raise ConfigError(f"config key 'degree' must lie in "
                          f"[{DEGREE_MIN}, {DEGREE_MAX}]")
    e_tol = _as_positive(raw.get("e_tol", 1e-6), "e_tol")
    grid = _parse_grid(raw.get("grid", {}), "grid")
    tolerances = _parse_tolerances(raw.get("tolerances", {}),
                                   "tolerances")
    connections = _parse_connections(raw.get("connections", {}),
                                     "connections")
    output_dir = _as_str(raw.get("output_dir", "out"), "output_dir")
    return RunConfig(model=model, resonance=resonance, jacobi=jacobi,
                     section=section, degree=degree, e_tol=e_tol,
                     grid=grid, tolerances=tolerances,
                     connections=connections, output_dir=output_dir)


def load_config(path) -> RunConfig:
    """Parse and validate one YAML run file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: "
                              f"{exc}") from exc
    if raw is None:
        raise ConfigError(f"config file {path} is empty")
    return parse_config(raw)


def config_to_dict(cfg: RunConfig) -> dict:
    return {
        "model": {"mu": cfg.model.mu, "name": cfg.model.name},
        "section": cfg.section,
        "resonance": {"m": cfg.resonance.m, "n": cfg.resonance.n,
                      "interior": cfg.resonance.interior,
                      "apsis": cfg.resonance.apsis},
        "jacobi": list(cfg.jacobi),
        "degree": cfg.degree,
        "e_tol": cfg.e_tol,
        "grid": {"m_grid": cfg.grid.m_grid, "n_max": cfg.grid.n_max},
        "tolerances": {"ode_abs": cfg.tolerances.ode_abs,
                       "ode_rel": cfg.tolerances.ode_rel,
                       "newton": cfg.tolerances.newton,
                       "bisection": cfg.tolerances.bisection},
        "connections": {
            "include_fundamental":
                cfg.connections.include_fundamental},
        "output_dir": cfg.output_dir,
    }


def config_hash(cfg: RunConfig) -> str:
    """Short digest of the resolved configuration for provenance.

    Only keys that influence computed numbers participate; where the
    files land (output_dir) does not change what they contain.
    """
    payload = config_to_dict(cfg)
    payload.pop("output_dir")
    canonical = json.dumps(payload, sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]
