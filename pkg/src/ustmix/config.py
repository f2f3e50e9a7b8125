"""Strict config documents.

A config is a TOML (or, from a manifest, JSON) mapping. Each command has a
schema; unknown keys and type mismatches are reported with their dotted
field path, and defaults are filled in so the stored document is complete.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Optional


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        self.path = path
        super().__init__(f"{path or '<root>'}: {msg}")


REQUIRED = object()


@dataclass(frozen=True)
class Field:
    check: Callable[[Any, str], Any]
    default: Any = REQUIRED


def _join(path, key):
    return f"{path}.{key}" if path else str(key)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


# --- leaf checks -------------------------------------------------------------------


def integer(lo: Optional[int] = None):
    def check(v, path):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(path, f"expected an integer, got {v!r}")
        if lo is not None and v < lo:
            raise ConfigError(path, f"must be >= {lo}")
        return v

    return check


def number(positive: bool = False, nonneg: bool = False):
    def check(v, path):
        if not _is_num(v) or not math.isfinite(v):
            raise ConfigError(path, f"expected a finite number, got {v!r}")
        if positive and v <= 0:
            raise ConfigError(path, "must be positive")
        if nonneg and v < 0:
            raise ConfigError(path, "must be non-negative")
        return float(v)

    return check


def string(choices=None):
    def check(v, path):
        if not isinstance(v, str):
            raise ConfigError(path, f"expected a string, got {v!r}")
        if choices is not None and v not in choices:
            raise ConfigError(path, f"must be one of {sorted(choices)}")
        return v

    return check


def boolean(v, path):
    if not isinstance(v, bool):
        raise ConfigError(path, f"expected true or false, got {v!r}")
    return v


def point(v, path):
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise ConfigError(path, "expected a point [x, y]")
    return [number()(c, f"{path}[{i}]") for i, c in enumerate(v)]


def list_of(item, min_len: int = 0):
    def check(v, path):
        if not isinstance(v, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {v!r}")
        if len(v) < min_len:
            raise ConfigError(path, f"needs at least {min_len} entries")
        return [item(x, f"{path}[{i}]") for i, x in enumerate(v)]

    return check


def number_or_list(v, path):
    if isinstance(v, (list, tuple)):
        return list_of(number(positive=True), 1)(v, path)
    return number(positive=True)(v, path)


def table(schema: dict, rule: Optional[Callable[[dict, str], None]] = None):
    def check(v, path):
        return validate(v, schema, path, rule)

    return check


def validate(doc, schema: dict, path: str = "", rule=None) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(path, f"expected a table, got {doc!r}")
    unknown = sorted(set(doc) - set(schema))
    if unknown:
        raise ConfigError(_join(path, unknown[0]), f"unknown key (allowed: {', '.join(sorted(schema))})")
    out = {}
    for key, f in schema.items():
        p = _join(path, key)
        if key in doc:
            out[key] = f.check(doc[key], p)
        elif f.default is REQUIRED:
            raise ConfigError(p, "required")
        elif f.default is not None:
            out[key] = f.default
    if rule is not None:
        rule(out, path)
    return out


# --- shapes and domains ---------------------------------------------------------------


def shape(v, path):
    if not isinstance(v, dict) or "kind" not in v:
        raise ConfigError(path, "expected a shape table with a 'kind'")
    kind = v["kind"]
    schemas = {
        "disc": {"kind": Field(string()), "center": Field(point, [0.0, 0.0]), "radius": Field(number(positive=True))},
        "rectangle": {"kind": Field(string()), "box": Field(list_of(number(), 4))},
        "polygon": {"kind": Field(string()), "vertices": Field(list_of(point, 3))},
        "slit": {"kind": Field(string()), "base": Field(shape), "slit": Field(list_of(point, 2))},
        "difference": {"kind": Field(string()), "base": Field(shape), "holes": Field(list_of(shape, 1))},
    }
    if kind not in schemas:
        raise ConfigError(_join(path, "kind"), f"unknown shape kind {kind!r}")
    out = validate(v, schemas[kind], path)
    if kind == "rectangle":
        if len(out["box"]) != 4:
            raise ConfigError(_join(path, "box"), "expected [x0, y0, x1, y1]")
        x0, y0, x1, y1 = out["box"]
        if not (x1 > x0 and y1 > y0):
            raise ConfigError(_join(path, "box"), "degenerate rectangle")
    return out


DOMAIN = {
    "shape": Field(shape),
    "marked": Field(point, None),
    "marked_side": Field(integer(), 0),
}


def _graph_rule(d, path):
    has_grid = "grid" in d
    has_shape = "shape" in d
    if has_grid == has_shape:
        raise ConfigError(path, "give exactly one of 'grid' or 'shape'")
    if has_grid and ("marked" in d or d.get("marked_side", 0)):
        raise ConfigError(_join(path, "marked"), "only allowed with 'shape'")
    if has_shape and "mesh" not in d:
        raise ConfigError(_join(path, "mesh"), "required with 'shape'")


GRAPH = {
    "grid": Field(integer(1), None),
    "shape": Field(shape, None),
    "marked": Field(point, None),
    "marked_side": Field(integer(), 0),
    "mesh": Field(number(positive=True), None),
}

graph_table = table(GRAPH, _graph_rule)
domain_table = table(DOMAIN)
