"""Run configuration: TOML loading, validation, overrides and digests."""

from __future__ import annotations

import ast
import hashlib
import json
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .core import UsageError
from .diffusion import PropagationConfig
from .models import ModelCatalogEntry, make_model

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "compile_function"]


class ConfigError(UsageError):
    """Invalid configuration; the message names the file line when known."""


_RUN_KEYS = {
    "dt": float, "T": float, "N": int, "lam": float, "mode": str, "burn_in": float,
    "resample_interval": int, "ess_fraction": float, "bisection_tol": float, "bridge": bool,
    "drift_cap": bool, "energy_cap": bool, "init": str, "init_sweeps": int,
    "init_step": float, "max_time": float, "n_islands": int, "roulette": float,
    "block_size": int, "vmc_steps": int, "vmc_chains": int, "proposal_scale": float,
}
_SECTIONS = {
    "run": _RUN_KEYS,
    "parameters": None,
    "estimators": {
        "functionals": list, "forms": list, "test_functions": list, "velocity": str,
        "max_z": float, "consistency_z": float,
    },
    "grid": {"h": float, "lower": list, "upper": list, "delta": float, "method": str,
             "fd_gradient": bool, "functionals": list},
    "optimize": {"gamma": float, "iterations": int, "form": str, "n_sigma": float},
    "output": {"format": str, "path": str, "timing": bool},
}
_TOP = {"model": str, "theta": list, "seed": int, "threads": int}


def _locate(text: str | None, section: str | None, key: str | None) -> int | None:
    """1-based line of ``key`` inside ``[section]`` (or of the header itself)."""
    if not text:
        return None
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[\s*([^\]]+?)\s*\]", s)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section and re.match(
            rf"^{re.escape(key)}\s*=", s
        ):
            return i
    return None


@dataclass
class RunConfig:
    """Validated run settings."""

    model: str
    parameters: dict = field(default_factory=dict)
    theta: list = field(default_factory=list)
    seed: int = 0
    threads: int = 1
    run: dict = field(default_factory=dict)
    estimators: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    optimize: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    source: str = "<config>"
    _entry: ModelCatalogEntry | None = field(default=None, repr=False, compare=False)

    @property
    def entry(self) -> ModelCatalogEntry:
        if self._entry is None:
            self._entry = make_model(self.model, self.parameters)
        return self._entry

    def theta_array(self) -> np.ndarray:
        return self.entry.family.check_theta(self.theta)

    def setting(self, key: str, default=None):
        """Run setting with the model defaults as fallback."""
        if key in self.run:
            return self.run[key]
        return self.entry.defaults.get(key, default)

    def propagation(self) -> PropagationConfig:
        kw = {}
        for k in ("dt", "T", "lam", "mode", "resample_interval", "ess_fraction",
                  "bisection_tol", "bridge", "drift_cap", "energy_cap", "init",
                  "init_sweeps", "init_step", "max_time", "n_islands", "roulette",
                  "block_size", "burn_in"):
            v = self.setting(k)
            if v is not None:
                kw[k] = v
        if "dt" not in kw or "T" not in kw:
            raise ConfigError(f"{self.source}: run.dt and run.T are required for this model")
        kw["threads"] = self.threads
        return PropagationConfig(**kw)

    @property
    def N(self) -> int:
        n = self.setting("N")
        if n is None:
            raise ConfigError(f"{self.source}: run.N is required for this model")
        return int(n)

    def canonical(self) -> dict:
        """Settings that affect results; threads and output are left out."""
        d = {
            "model": self.model, "parameters": self.parameters,
            "theta": [float(t) for t in self.theta_array()], "seed": self.seed,
            "run": self.run, "estimators": self.estimators, "grid": self.grid,
            "optimize": self.optimize,
        }
        return json.loads(json.dumps(d, sort_keys=True, default=float))

    def digest(self) -> str:
        """Short SHA-256 of the settings that affect results."""
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _check_type(value, typ, where: str):
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(f"{where}: must be finite")
        return float(value)
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true or false, got {value!r}")
        return value
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if typ is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected an array, got {value!r}")
        return value
    return value


def _where(source, text, section, key, via_set):
    if via_set:
        return f"--set {section + '.' if section else ''}{key}"
    line = _locate(text, section, key)
    name = f"{section}.{key}" if section else key
    return f"{source}:{line}: {name}" if line else f"{source}: {name}"


def parse_config(data: dict, text: str | None = None, source: str = "<config>",
                 set_keys: set | None = None) -> RunConfig:
    """Validate a decoded TOML document."""
    set_keys = set_keys or set()
    kw: dict[str, Any] = {"source": source}
    for key, value in data.items():
        via = (None, key) in set_keys
        if key in _TOP:
            kw[key] = _check_type(value, _TOP[key], _where(source, text, None, key, via))
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{_where(source, text, None, key, via)}: expected a table")
            allowed = _SECTIONS[key]
            sec = {}
            for k, v in value.items():
                w = _where(source, text, key, k, (key, k) in set_keys)
                if allowed is None:
                    sec[k] = v
                elif k not in allowed:
                    raise ConfigError(f"{w}: unknown key (allowed: {', '.join(sorted(allowed))})")
                else:
                    sec[k] = _check_type(v, allowed[k], w)
            kw[key] = sec
        else:
            line = _locate(text, None, key) or _locate(text, key, None)
            loc = f"{source}:{line}" if line else source
            raise ConfigError(f"{loc}: unknown key {key!r}")
    if "model" not in kw:
        raise ConfigError(f"{source}: 'model' is required")
    cfg = RunConfig(**kw)
    try:
        entry = cfg.entry
    except UsageError as exc:
        raise ConfigError(f"{_where(source, text, None, 'model', False)}: {exc}") from None
    if not cfg.theta:
        cfg.theta = [float(t) for t in entry.theta0]
    try:
        cfg.theta_array()
    except (UsageError, ValueError) as exc:
        raise ConfigError(f"{_where(source, text, None, 'theta', (None, 'theta') in set_keys)}: {exc}") from None
    if cfg.threads < 1:
        raise ConfigError(f"{_where(source, text, None, 'threads', False)}: must be >= 1")
    mode = cfg.run.get("mode")
    if mode is not None and mode not in ("plain", "drifted"):
        raise ConfigError(f"{_where(source, text, 'run', 'mode', ('run', 'mode') in set_keys)}: "
                          "must be 'plain' or 'drifted'")
    if cfg.run.get("dt") is not None or entry.defaults.get("dt") is not None:
        try:
            cfg.propagation()
        except UsageError as exc:
            raise ConfigError(f"{source}: run: {exc}") from None
    return cfg


def _parse_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(data: dict, overrides: list[str]) -> set:
    """Apply ``key=value`` overrides in place; return the touched keys."""
    touched = set()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item}: expected key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) > 2 or not all(parts):
            raise ConfigError(f"--set {item}: keys are 'name' or 'section.name'")
        value = _parse_value(raw.strip())
        if len(parts) == 1:
            data[parts[0]] = value
            touched.add((None, parts[0]))
        else:
            sec = data.setdefault(parts[0], {})
            if not isinstance(sec, dict):
                raise ConfigError(f"--set {item}: {parts[0]} is not a table")
            sec[parts[1]] = value
            touched.add((parts[0], parts[1]))
    return touched


def load_config(path: str | Path | None, overrides: list[str] | None = None,
                seed: int | None = None, threads: int | None = None) -> RunConfig:
    """Read, override and validate a configuration file.

    Raises
    ------
    ConfigError
        with ``file:line`` in the message for syntax and validation errors.
    """
    text = None
    source = "<overrides>"
    data: dict = {}
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise OSError(f"{source}: cannot read config ({exc.strerror})") from None
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{source}: {exc}") from None
    touched = apply_overrides(data, overrides or [])
    if seed is not None:
        data["seed"] = seed
    if threads is not None:
        data["threads"] = threads
    return parse_config(data, text, source, touched)


# --------------------------------------------------------------------------- functions


_FUNCS = {
    "exp": np.exp, "log": np.log, "sqrt": np.sqrt, "sin": np.sin, "cos": np.cos,
    "tan": np.tan, "abs": np.abs, "tanh": np.tanh, "sinh": np.sinh, "cosh": np.cosh,
}
_CONSTS = {"pi": math.pi, "e": math.e}
_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd, ast.Mod,
)


def compile_function(expr: str, dimension: int,
                     named: dict[str, Callable] | None = None) -> Callable[[np.ndarray], np.ndarray]:
    """Turn a coordinate expression into a batched function.

    Coordinates are ``x, y, z`` (first three axes) or ``x1 .. xd``; ``^`` is
    a power. Names of the model's test functions are accepted as they are.

    >>> f = compile_function("x^2 + 1", 1)
    >>> f(np.array([[2.0]]))
    array([5.])
    """
    named = named or {}
    if expr in named:
        return named[expr]
    src = expr.replace("^", "**")
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError:
        raise ConfigError(f"cannot parse function {expr!r}") from None
    coords = {f"x{i + 1}": i for i in range(dimension)}
    for i, n in enumerate("xyz"[:dimension]):
        coords[n] = i
    for node in ast.walk(tree):
        if not isinstance(node, _NODES):
            raise ConfigError(f"function {expr!r}: unsupported syntax {type(node).__name__}")
        if isinstance(node, ast.Call) and not (
            isinstance(node.func, ast.Name) and node.func.id in _FUNCS
        ):
            raise ConfigError(f"function {expr!r}: unsupported call")
        if isinstance(node, ast.Name) and node.id not in coords and node.id not in _FUNCS \
                and node.id not in _CONSTS:
            raise ConfigError(f"function {expr!r}: unknown name {node.id!r}")
    code = compile(tree, "<function>", "eval")

    def fn(x):
        x = np.atleast_2d(x)
        env = {k: x[:, i] for k, i in coords.items()}
        env.update(_FUNCS)
        env.update(_CONSTS)
        out = eval(code, {"__builtins__": {}}, env)  # noqa: S307 - AST checked above
        return np.broadcast_to(np.asarray(out, dtype=float), (x.shape[0],)).copy()

    return fn
