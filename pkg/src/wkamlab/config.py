"""Experiment configuration: flat INI-style key-value text with sections."""

import configparser
import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from .geometry import ModelManifold


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


def _parse_pair(text, what):
    parts = [p.strip() for p in text.replace(",", " ").split()]
    if len(parts) != 2:
        raise ConfigError(f"{what} must be two numbers, got {text!r}")
    return float(parts[0]), float(parts[1])


def _parse_floats(text):
    return [float(p) for p in text.replace(",", " ").split()]


@dataclass
class ExperimentConfig:
    # model block
    n: int = 4
    lam: float = 2.0
    warp: str = "exp"
    c_v: float = 0.5
    window: tuple = (-1.0, 4.0)
    grid_h: float = 0.005
    custom_warp_file: str | None = None
    # solver block
    h_t: float = 0.01
    search_radius: float | str = "auto"
    tol: float = 1e-6
    max_iters: int = 20000
    potential_rule: str = "trapezoid"
    candidate_rule: str = "interpolated"
    core: tuple = (0.0, 3.0)
    conjugate: bool = False
    conjugate_horizon: float | str = "auto"
    # flow block
    base_points: list = field(default_factory=lambda: [0.0])
    T: float = 10.0
    dt: float = 1e-3
    scheme: str = "yoshida4"
    flow_direction: int = 1
    # riccati block
    s3_init: float | str = "rigid"
    riccati_dt: float = 1e-4
    riccati_T: float = 1.0
    rescale: bool = True
    # outputs block
    directory: str = "out"
    formats: list = field(default_factory=lambda: ["csv", "json"])
    # acceptance block: raw overrides for AcceptanceParams fields
    acceptance: dict = field(default_factory=dict)

    def model(self) -> ModelManifold:
        kwargs = dict(n=self.n, lam=self.lam, warp=self.warp,
                      window=self.window, c_v=self.c_v)
        if self.warp == "custom":
            if not self.custom_warp_file:
                raise ConfigError("custom warp needs custom_warp_file")
            try:
                data = np.loadtxt(self.custom_warp_file)
            except OSError as exc:
                raise ConfigError(f"cannot read custom_warp_file: {exc}") from exc
            if data.ndim != 2 or data.shape[1] != 2:
                raise ConfigError("custom_warp_file must have two columns: r, w(r)")
            kwargs["custom_r"] = data[:, 0]
            kwargs["custom_w"] = data[:, 1]
        try:
            return ModelManifold(**kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


_SCHEMA = {
    "model": {"n": "n", "lambda": "lam", "warp": "warp", "c_v": "c_v",
              "window": "window", "grid_h": "grid_h",
              "custom_warp_file": "custom_warp_file"},
    "solver": {"h_t": "h_t", "search_radius": "search_radius", "tol": "tol",
               "max_iters": "max_iters", "potential_rule": "potential_rule",
               "candidate_rule": "candidate_rule", "core": "core",
               "conjugate": "conjugate", "conjugate_horizon": "conjugate_horizon"},
    "flow": {"base_points": "base_points", "t": "T", "dt": "dt",
             "scheme": "scheme", "direction": "flow_direction"},
    "riccati": {"s3_init": "s3_init", "dt": "riccati_dt", "t": "riccati_T",
                "rescale": "rescale"},
    "outputs": {"directory": "directory", "formats": "formats"},
}

_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _coerce(cfg: ExperimentConfig, attr: str, raw: str):
    raw = raw.strip()
    if attr in ("window", "core"):
        return _parse_pair(raw, attr)
    if attr == "base_points":
        return _parse_floats(raw)
    if attr == "formats":
        return [p.strip() for p in raw.split(",") if p.strip()]
    if attr in ("conjugate", "rescale"):
        if raw.lower() not in _BOOL:
            raise ConfigError(f"{attr} must be a boolean, got {raw!r}")
        return _BOOL[raw.lower()]
    if attr in ("n", "max_iters", "flow_direction"):
        return int(raw)
    if attr in ("search_radius", "conjugate_horizon"):
        return raw if raw == "auto" else float(raw)
    if attr in ("s3_init",):
        return raw if raw == "rigid" else float(raw)
    if attr in ("warp", "potential_rule", "candidate_rule", "scheme",
                "directory", "custom_warp_file"):
        return raw
    return float(raw)


def load_config(path: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        read = parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    return _from_parser(parser, path)


def _from_parser(parser, where) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section == "acceptance":
            for key, raw in parser.items(section):
                cfg.acceptance[key] = raw.strip()
            continue
        if section not in _SCHEMA:
            raise ConfigError(f"{where}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
            attr = _SCHEMA[section][key]
            try:
                setattr(cfg, attr, _coerce(cfg, attr, raw))
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"{where}: [{section}] {key} = {raw!r}: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig):
    if cfg.n < 3:
        raise ConfigError("model.n must be >= 3")
    if cfg.lam <= 0:
        raise ConfigError("model.lambda must be positive")
    if cfg.warp not in ("cosh", "exp", "custom"):
        raise ConfigError(f"unknown warp kind {cfg.warp!r} (cosh|exp|custom)")
    if cfg.window[1] <= cfg.window[0]:
        raise ConfigError("model.window is empty")
    if cfg.grid_h <= 0 or cfg.h_t <= 0 or cfg.dt <= 0:
        raise ConfigError("step sizes must be positive")
    if cfg.tol <= 0 or cfg.max_iters < 1:
        raise ConfigError("solver tolerance/budget invalid")
    if cfg.scheme not in ("verlet", "yoshida4"):
        raise ConfigError(f"unknown integrator scheme {cfg.scheme!r}")
    if cfg.flow_direction not in (-1, 1):
        raise ConfigError("flow.direction must be +1 or -1")


def dump_config(cfg: ExperimentConfig, sections=None) -> str:
    """Canonical serialization; load(dump(cfg)) reproduces cfg."""
    out = io.StringIO()
    for section, keys in _SCHEMA.items():
        if sections is not None and section not in sections:
            continue
        out.write(f"[{section}]\n")
        for key, attr in keys.items():
            val = getattr(cfg, attr)
            if val is None:
                continue
            if isinstance(val, (tuple, list)):
                val = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            elif isinstance(val, float):
                val = repr(val)
            out.write(f"{key} = {val}\n")
        out.write("\n")
    if cfg.acceptance and (sections is None or "acceptance" in sections):
        out.write("[acceptance]\n")
        for key in sorted(cfg.acceptance):
            out.write(f"{key} = {cfg.acceptance[key]}\n")
        out.write("\n")
    return out.getvalue()


def loads_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read_string(text)
    return _from_parser(parser, "<string>")


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply section.key=value strings on top of a config."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        key = key.strip()
        if "." not in key:
            raise ConfigError(f"override key {key!r} must be section.key")
        section, _, name = key.partition(".")
        if section == "acceptance":
            cfg.acceptance[name] = raw.strip()
            continue
        if section not in _SCHEMA or name not in _SCHEMA[section]:
            raise ConfigError(f"unknown override target {key!r}")
        attr = _SCHEMA[section][name]
        try:
            setattr(cfg, attr, _coerce(cfg, attr, raw.strip()))
        except ValueError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from exc
    validate_config(cfg)
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of the computation-defining sections (output location excluded)."""
    text = dump_config(cfg, sections=("model", "solver", "flow", "riccati", "acceptance"))
    return hashlib.sha256(text.encode()).hexdigest()
