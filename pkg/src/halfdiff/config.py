"""Run configuration: TOML schema, validation and closed-form expressions."""

from __future__ import annotations

import ast
import hashlib
import math
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
    """Invalid configuration; the message names the offending key path."""


# ---------------------------------------------------------------------------
# expressions

_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "sqrt": np.sqrt,
    "log": np.log,
    "tanh": np.tanh,
    "abs": np.abs,
}
_CONSTS = {"pi": math.pi, "e": math.e}
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


class Expression:
    """Whitelisted arithmetic in ``x, y, t`` with ``sin cos exp sqrt log tanh abs``.

    >>> Expression("t**2 * sin(pi*x)", ("t", "x"))(0.5, 0.5)
    array(0.25)
    """

    def __init__(self, source: str, variables: tuple[str, ...]):
        self.source = source
        self.variables = variables
        try:
            tree = ast.parse(source, mode="eval")
        except SyntaxError as exc:
            raise ConfigError(f"cannot parse expression {source!r}: {exc.msg}") from None
        self._check(tree.body)
        self.tree = tree.body

    def _check(self, node):
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            self._check(node.operand)
        elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            pass
        elif isinstance(node, ast.Name):
            if node.id not in self.variables and node.id not in _CONSTS:
                raise ConfigError(
                    f"unknown name {node.id!r} in {self.source!r}; allowed: {', '.join(self.variables)}"
                )
        elif isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS:
            if len(node.args) != 1 or node.keywords:
                raise ConfigError(f"{node.func.id} takes one argument in {self.source!r}")
            self._check(node.args[0])
        else:
            raise ConfigError(f"unsupported construct {ast.dump(node)[:40]} in {self.source!r}")

    def _eval(self, node, env):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            val = self._eval(node.operand, env)
            return -val if isinstance(node.op, ast.USub) else val
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id] if node.id in env else _CONSTS[node.id]
        return _FUNCS[node.func.id](self._eval(node.args[0], env))

    def __call__(self, *args):
        env = {name: np.asarray(a, dtype=float) for name, a in zip(self.variables, args)}
        with np.errstate(all="ignore"):
            shape = np.broadcast(*env.values()).shape if env else ()
            return np.broadcast_to(np.asarray(self._eval(self.tree, env), dtype=float), shape).copy()

    def __repr__(self):
        return f"Expression({self.source!r})"


def space_vars(dim: int) -> tuple[str, ...]:
    return ("x", "y")[:dim]


def as_space_fn(value, dim: int, path: str):
    """Number or expression string in ``x[, y]``."""
    if isinstance(value, bool):
        raise ConfigError(f"{path}: expected a number or expression")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        return Expression(value, space_vars(dim))
    raise ConfigError(f"{path}: expected a number or expression")


def as_space_time_fn(value, dim: int, path: str):
    """Callable ``fn(t, x[, y])`` from a number or an expression string."""
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise ConfigError(f"{path}: expected a number or expression")
    src = repr(float(value)) if not isinstance(value, str) else value
    return Expression(src, ("t",) + space_vars(dim))


# ---------------------------------------------------------------------------
# schema

_REQ = object()

SCHEMA: dict[str, dict[str, Any]] = {
    "equation": {"rho1": _REQ, "rho2": _REQ, "a": 1.0, "b": 0.0, "c": 0.0, "m": None, "allow_degenerate": False},
    "grid": {
        "dim": 1,
        "extents": _REQ,
        "n_cells": _REQ,
        "n_steps": _REQ,
        "T": _REQ,
        "t0_index": _REQ,
        "delta": None,
        "gamma": ["x_hi"],
    },
    "source": {"f": None, "R": None, "g": None, "exact": None},
    "reduction": {"levels": 3, "cut_time": 0.25, "boundary_layers": 2},
    "carleman": {
        "lambda": 1.0,
        "epsilon": 0.5,
        "omega": None,
        "s_sweep": [2, 4, 8, 16, 32, 64],
        "fields": 10,
        "seed": 0,
        "extension": 1.4,
    },
    "inverse": {
        "basis_size": 32,
        "alpha": "auto",
        "noise": 0.0,
        "noise_levels": [1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
        "trials": 8,
        "seed": 0,
        "M": None,
        "f_true": None,
        "omega": None,
        "refine": 2,
        "method": "tikhonov",
        "force": False,
    },
    "output": {"directory": "output", "formats": ["csv", "npz"]},
}


@dataclass(frozen=True)
class RunConfig:
    equation: dict
    grid: dict
    source: dict
    reduction: dict
    carleman: dict
    inverse: dict
    output: dict
    sha256: str
    path: str


def _fill(block: str, given: dict) -> dict:
    spec = SCHEMA[block]
    if not isinstance(given, dict):
        raise ConfigError(f"{block}: expected a table")
    unknown = sorted(set(given) - set(spec))
    if unknown:
        raise ConfigError(f"unknown key {block}.{unknown[0]}")
    out = {}
    for key, default in spec.items():
        if key in given:
            out[key] = given[key]
        elif default is _REQ:
            raise ConfigError(f"missing required key {block}.{key}")
        else:
            out[key] = default
    return out


def _number(block: dict, name: str, key: str, positive=False, integer=False):
    v = block[key]
    ok = isinstance(v, int) if integer else isinstance(v, (int, float))
    if isinstance(v, bool) or not ok:
        raise ConfigError(f"{name}.{key}: expected {'an integer' if integer else 'a number'}, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(f"{name}.{key} must be > 0, got {v!r}")
    return v


def parse_config(text: str, path: str = "<string>", require: tuple[str, ...] = ()) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown block [{unknown[0]}]")
    for block in require:
        if block not in raw:
            raise ConfigError(f"missing required block [{block}]")
    blocks = {}
    for block in SCHEMA:
        if block in raw or any(v is _REQ for v in SCHEMA[block].values()):
            blocks[block] = _fill(block, raw.get(block, {}))
        else:
            blocks[block] = _fill(block, {})
    g = blocks["grid"]
    if g["dim"] not in (1, 2):
        raise ConfigError(f"grid.dim must be 1 or 2, got {g['dim']!r}")
    for key in ("n_steps", "t0_index"):
        _number(g, "grid", key, integer=True)
    _number(g, "grid", "T", positive=True)
    eq = blocks["equation"]
    _number(eq, "equation", "rho1")
    _number(eq, "equation", "rho2")
    src = blocks["source"]
    if src["g"] is not None and (src["f"] is not None or src["R"] is not None):
        raise ConfigError("source: give either source.g or the pair source.f/source.R, not both")
    if (src["f"] is None) != (src["R"] is None):
        missing = "source.R" if src["R"] is None else "source.f"
        raise ConfigError(f"missing required key {missing} (a separated source needs both f and R)")
    digest = hashlib.sha256(text.encode()).hexdigest()
    return RunConfig(**blocks, sha256=digest, path=str(path))


def load_config(path: str | Path, require: tuple[str, ...] = ()) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p), require)
