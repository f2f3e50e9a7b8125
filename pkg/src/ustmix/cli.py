"""Command-line entry point.

Every run validates its config document, writes its outputs into
``<out>/<command>-<key>/`` where ``key`` is a digest of (command, config,
seed, threads, format, version, input digests), and records a
``manifest.json`` with output digests. ``ustmix replay manifest.json``
re-runs the recorded invocation and checks the outputs byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    Field,
    boolean,
    domain_table,
    graph_table,
    integer,
    list_of,
    number,
    number_or_list,
    point,
    shape,
    string,
    table,
    validate,
)
from .lattice import dumps

OUT_ENV = "USTMIX_OUT"
DEFAULT_OUT = "ustmix-runs"
FORMATS = ("csv", "json", "svg")


# --- helpers -------------------------------------------------------------------------------


def _clean(o):
    """JSON-safe copy: non-finite floats become strings, Fractions exact strings."""
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, np.ndarray):
        return [_clean(v) for v in o.tolist()]
    if isinstance(o, Fraction):
        return str(o)
    if isinstance(o, (float, np.floating)):
        f = float(o)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def to_json(obj) -> str:
    return dumps(_clean(obj)) + "\n"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def build_graph(doc: dict):
    from .lattice import DomainSpec, discretize, grid_wired, lattice_for
    from .geometry import shape_from_dict

    if "grid" in doc:
        return grid_wired(doc["grid"], doc.get("mesh", 1.0))
    m = doc.get("marked")
    spec = DomainSpec(shape_from_dict(doc["shape"]), tuple(m) if m is not None else None, doc["marked_side"])
    return discretize(lattice_for(spec, doc["mesh"]), spec)


def _domain(doc: dict):
    from .lattice import DomainSpec

    return DomainSpec.from_dict(doc)


def _shape(doc: dict):
    from .geometry import shape_from_dict

    return shape_from_dict(doc)


@dataclass
class Context:
    seed: int
    threads: int
    fmt: str
    stdout: list

    def say(self, text: str):
        self.stdout.append(text)


def _formats(ctx: Context, allowed, command: str):
    if ctx.fmt not in allowed:
        raise ConfigError("format", f"{command} writes {', '.join(allowed)}, not {ctx.fmt}")


# --- sampling commands ---------------------------------------------------------------------

SAMPLE = {
    "graph": Field(graph_table),
    "n": Field(integer(1), 1),
    "order": Field(string({"row-major", "random"}), "row-major"),
}


def run_sample_ust(cfg, ctx):
    from .rng import map_tasks, task_rng
    from .ust import tree_svg, wilson

    g = build_graph(cfg["graph"])
    trees = map_tasks(lambda i: wilson(g, order=cfg["order"], rng=task_rng(ctx.seed, i), log=False)[0], cfg["n"], ctx.threads)
    if ctx.fmt == "svg":
        return {f"tree_{i}.svg": tree_svg(t) for i, t in enumerate(trees)}
    rows = []
    for i, t in enumerate(trees):
        for v in range(g.n):
            h = int(t.heads[v])
            rows.append((i, int(g.vertices[v]), -1 if h == g.n else int(g.vertices[h]), int(t.edges[v])))
    if ctx.fmt == "csv":
        return {"trees.csv": "tree,tail,head,edge\n" + "".join(f"{a},{b},{c},{d}\n" for a, b, c, d in rows)}
    return {"trees.json": to_json({"n_vertices": g.n, "trees": [[int(e) for e in t.edges] for t in trees], "vertices": g.vertices})}


def run_sample_dimer(cfg, ctx):
    from .dimer import build_superposition, matching_svg, sample_dimer
    from .rng import map_tasks, task_rng

    g = build_graph(cfg["graph"])
    sup = build_superposition(g)
    mats = map_tasks(lambda i: sample_dimer(sup, rng=task_rng(ctx.seed, i))[0], cfg["n"], ctx.threads)
    if ctx.fmt == "svg":
        return {f"matching_{i}.svg": matching_svg(m) for i, m in enumerate(mats)}
    if ctx.fmt == "csv":
        body = "".join(f"{i},{b},{w}\n" for i, m in enumerate(mats) for b, w in m.pairs())
        return {"matchings.csv": "sample,black,white\n" + body}
    return {"matchings.json": to_json({"matchings": [[list(p) for p in m.pairs()] for m in mats]})}


def run_height(cfg, ctx):
    from .dimer import build_superposition, height_field, height_svg, reference_ray
    from .rng import map_tasks, task_rng
    from .ust import wilson

    g = build_graph(cfg["graph"])
    sup = build_superposition(g)
    ray = reference_ray(sup)

    def one(i):
        tree, _ = wilson(g, rng=task_rng(ctx.seed, i), log=False)
        return height_field(tree, sup, ray=ray)

    fields = map_tasks(one, cfg["n"], ctx.threads)
    if ctx.fmt == "svg":
        return {f"height_{i}.svg": height_svg(f) for i, f in enumerate(fields)}
    if ctx.fmt == "csv":
        lines = ["sample,face,x,y,height"]
        for i, f in enumerate(fields):
            for k, (c, h) in enumerate(zip(f.centroids, f.heights)):
                lines.append(f"{i},{k},{float(c[0])!r},{float(c[1])!r},{float(h)!r}")
        return {"heights.csv": "\n".join(lines) + "\n"}
    return {"heights.json": to_json({"centroids": fields[0].centroids if fields else [], "heights": [f.heights for f in fields]})}


# --- coupling commands ---------------------------------------------------------------------


def _coupling_rule(d, path):
    concentric = d["preset"] == "concentric"
    for key in ("D1", "D2") if concentric else ("R1", "R2", "u"):
        if key in d:
            raise ConfigError(f"{path}.{key}", f"not allowed with preset {d['preset']!r}")
    if concentric:
        d.setdefault("R1", 1.0)
        d.setdefault("R2", 1.5)
        d.setdefault("u", 0.3)
    else:
        for key in ("D1", "D2", "U", "U1", "U2", "U3"):
            if key not in d:
                raise ConfigError(f"{path}.{key}", "required with preset 'explicit'")


COUPLING = {
    "preset": Field(string({"concentric", "explicit"}), "concentric"),
    "R1": Field(number(positive=True), None),
    "R2": Field(number(positive=True), None),
    "u": Field(number(positive=True), None),
    "D1": Field(domain_table, None),
    "D2": Field(domain_table, None),
    "U": Field(shape, None),
    "U1": Field(shape, None),
    "U2": Field(shape, None),
    "U3": Field(shape, None),
    "mesh": Field(number(positive=True), 1 / 32),
    "r": Field(number(positive=True), 0.05),
    "eps": Field(number(positive=True), 0.2),
    "k": Field(integer(1), 1),
    "max_tries": Field(integer(1), 10_000),
    "rect_halfwidth": Field(number(positive=True), None),
    "branch_method": Field(string({"tube", "rejection"}), "tube"),
    "soup_cap": Field(number(positive=True), None),
}


def build_coupling(doc: dict):
    from .coupling import CouplingConfig

    d = {k: v for k, v in doc.items() if k not in ("preset", "R1", "R2", "u")}
    if doc["preset"] == "concentric":
        R1, R2, u = doc["R1"], doc["R2"], doc["u"]
        gap = (R1 - u) / 4
        d["D1"] = {"shape": {"kind": "disc", "center": [0.0, 0.0], "radius": R1}, "marked": [R1, 0.0]}
        d["D2"] = {"shape": {"kind": "disc", "center": [0.0, 0.0], "radius": R2}, "marked": [R2, 0.0]}
        for j, key in enumerate(("U", "U1", "U2", "U3")):
            d.setdefault(key, {"kind": "disc", "center": [0.0, 0.0], "radius": u + j * gap})
    try:
        return CouplingConfig.from_dict(d)
    except ValueError as exc:
        raise ConfigError("coupling", str(exc)) from None


def _report_outputs(report, ctx, stem):
    _formats(ctx, ("csv", "json"), stem)
    if ctx.fmt == "csv":
        return {f"{stem}.csv": report.to_csv()}
    return {f"{stem}.json": to_json({"summary": report.summary(), "runs": report.runs})}


def _say_freqs(ctx, report, keys):
    s = report.summary()
    for k in keys:
        if k in s:
            ctx.say(f"{k} {s[k]['freq']:.4f} +- {s[k]['stderr']:.4f} (n={s[k]['n']})")


def run_couple_upper(cfg, ctx):
    from .coupling import upper_coupling_experiment

    config = build_coupling(cfg["coupling"])
    rep = upper_coupling_experiment(config, cfg["n_runs"], seed=ctx.seed, threads=ctx.threads, install_branch=cfg["install_branch"])
    _say_freqs(ctx, rep, ("agree_U", "agree_U1"))
    return _report_outputs(rep, ctx, "upper")


def run_couple_lower(cfg, ctx):
    from .coupling import lower_coupling_experiment

    config = build_coupling(cfg["coupling"])
    rep = lower_coupling_experiment(config, cfg["n_runs"], seed=ctx.seed, threads=ctx.threads)
    _say_freqs(ctx, rep, ("agree_U1", "agree_U", "good"))
    return _report_outputs(rep, ctx, "lower")


PAIR = {"outer": Field(shape), "inner": Field(shape)}


def run_annulus(cfg, ctx):
    from .coupling import annulus_exact, annulus_experiment

    g = build_graph(cfg["graph"])
    pairs = [(_shape(p["outer"]), _shape(p["inner"])) for p in cfg["pairs"]]
    if cfg["exact"]:
        _formats(ctx, ("csv", "json"), "annulus")
        cmp_ = annulus_exact(g, pairs, cfg["max_vertices"]).to_dict()
        ctx.say(f"C {cmp_['C']!r} tv {cmp_['tv']!r}")
        if ctx.fmt == "csv":
            return {"annulus_exact.csv": ",".join(cmp_) + "\n" + ",".join(repr(v) for v in cmp_.values()) + "\n"}
        return {"annulus_exact.json": to_json(cmp_)}
    rep = annulus_experiment(g, pairs, cfg["n_runs"], seed=ctx.seed, threads=ctx.threads)
    _say_freqs(ctx, rep, ("avoid",))
    return _report_outputs(rep, ctx, "annulus")


# --- statistics commands -------------------------------------------------------------------


STABILITY = {
    "D1": Field(domain_table),
    "D2": Field(domain_table),
    "U": Field(shape),
    "meshes": Field(list_of(number(positive=True), 1)),
    "n": Field(integer(1)),
    "k": Field(integer(1), 3),
    "n_sectors": Field(integer(1), 4),
}


def _rn_rule(d, path):
    files = "samples1" in d or "samples2" in d
    if files == ("domains" in d):
        raise ConfigError(path, "give either samples1 and samples2, or domains")
    if files:
        for key in ("samples1", "samples2"):
            if key not in d:
                raise ConfigError(f"{path}.{key}" if path else key, "required with sample files")


def read_keys(path: str, field: str) -> list:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(field, f"cannot read {path}: {exc.strerror}") from None
    keys = [line for line in text.splitlines() if line.strip()]
    if not keys:
        raise ConfigError(field, f"no samples in {path}")
    return keys


def _rn_outputs(reports: dict, ctx):
    _formats(ctx, ("csv", "json"), "rn-report")
    for label, rep in reports.items():
        ctx.say(f"{label} min_C(0.9) {rep.min_C()!r} support {rep.support}")
    if ctx.fmt == "csv":
        lines = ["label,C,captured1,captured2"]
        for label, rep in reports.items():
            for C in rep.C_grid:
                lines.append(f"{label},{C!r},{float(rep.captured1[C])!r},{float(rep.captured2[C])!r}")
        return {"rn_report.csv": "\n".join(lines) + "\n"}
    return {"rn_report.json": to_json({label: dict(rep.to_dict(), min_C=rep.min_C()) for label, rep in reports.items()})}


def run_rn_report(cfg, ctx):
    from .stats import rn_report, stability_experiment

    grid = tuple(cfg["C_grid"])
    if "domains" in cfg:
        d = cfg["domains"]
        if d["n"] < 1:
            raise ConfigError("domains.n", "needs at least one sample")
        reps = stability_experiment(
            _domain(d["D1"]), _domain(d["D2"]), _shape(d["U"]), d["meshes"], d["n"], ctx.seed, d["k"], d["n_sectors"], C_grid=grid
        )
        return _rn_outputs({f"mesh={m!r}": r for m, r in reps.items()}, ctx)
    a = read_keys(cfg["samples1"], "samples1")
    b = read_keys(cfg["samples2"], "samples2")
    return _rn_outputs({"files": rn_report(a, b, smoothing=cfg["smoothing"], C_grid=grid)}, ctx)


def run_continuity(cfg, ctx):
    from .stats import continuity_experiment, large_domain_experiment, perturbed_disc

    _formats(ctx, ("csv", "json"), "continuity")
    U = _shape(cfg["U"])
    if cfg["family"] == "perturbed-disc":
        rep = continuity_experiment(perturbed_disc, cfg["values"], U, cfg["mesh"], cfg["n"], ctx.seed, cfg["k"], cfg["n_sectors"])
    else:
        rep = large_domain_experiment(cfg["values"], U, cfg["mesh"], cfg["n"], ctx.seed, cfg["k"], cfg["n_sectors"])
    ctx.say(f"noise {rep.noise!r}")
    if ctx.fmt == "csv":
        return {"continuity.csv": rep.to_csv()}
    return {"continuity.json": to_json({"param": rep.param, "values": rep.values, "tv": rep.tv, "noise": rep.noise, "n": rep.n})}


def run_height_shift(cfg, ctx):
    from .dimer import build_superposition, height_faces
    from .stats import height_shift_experiment

    _formats(ctx, ("csv", "json"), "height-shift")
    g = build_graph(cfg["graph"])
    faces = None
    if "U" in cfg:
        U = _shape(cfg["U"])
    else:
        # a single face: the one nearest the centre of the interior
        from .geometry import Disc

        sup = build_superposition(g)
        cents = np.array([sup.pos[list(q)].mean(axis=0) for q in height_faces(sup)])
        mid = g.positions.mean(axis=0)
        faces = [int(np.argmin(np.hypot(*(cents - mid).T)))]
        U = Disc(tuple(map(float, cents[faces[0]])), g.graph.mesh / 4)
    rep = height_shift_experiment(g, U, cfg["shift"], cfg["n"], ctx.seed, C=cfg.get("C"), min_count=cfg["min_count"], faces=faces)
    ctx.say(f"C {rep.C!r} captured {float(rep.report.captured1[rep.C]) if rep.C in rep.report.captured1 else float('nan')!r}")
    if ctx.fmt == "csv":
        return {"height_shift.csv": rep.report.to_csv()}
    return {
        "height_shift.json": to_json(
            {"shift": rep.shift, "C": rep.C, "stratified_fraction": rep.stratified_fraction, "strata": rep.strata, "report": rep.report.to_dict()}
        )
    }


# --- estimates --------------------------------------------------------------------------


def _estimate_outputs(rep, ctx, stem):
    _formats(ctx, ("csv", "json"), stem)
    ctx.say(f"estimate {rep.estimate!r} stderr {rep.stderr!r}")
    if ctx.fmt == "json":
        return {f"{stem}.json": to_json(rep.to_dict())}
    ladder = rep.parameters.get("ladder")
    rows = ladder if ladder else [rep.to_dict()]
    lines = ["r,estimate,stderr,n_samples"]
    for row in rows:
        lines.append(f"{row['parameters'].get('r', '')!r},{row['estimate']!r},{row['stderr']!r},{row['n_samples']}")
    return {f"{stem}.csv": "\n".join(lines) + "\n"}


def run_crossing(cfg, ctx):
    from .walk import estimate_crossing

    g = build_graph(cfg["graph"])
    rep = estimate_crossing(g, cfg["z"], cfg["eps"], cfg["orientation"], cfg["n"], rng=ctx.seed, threads=ctx.threads)
    return _estimate_outputs(rep, ctx, "crossing")


def run_beurling(cfg, ctx):
    from .walk import estimate_beurling

    g = build_graph(cfg["graph"])
    v = g.nearest(cfg["center"])
    c = g.position(v)
    u = np.array([math.cos(cfg["angle"]), math.sin(cfg["angle"])])

    def obstacle(r, R):
        return np.array([c + r * u, c + R * u])

    rep = estimate_beurling(g, v, cfg["r"], cfg["R"], obstacle, cfg["n"], rng=ctx.seed, threads=ctx.threads)
    return _estimate_outputs(rep, ctx, "beurling")


def run_harmonic(cfg, ctx):
    from .walk import estimate_harmonic_measure

    g = build_graph(cfg["graph"])
    v = g.nearest(cfg["start"])
    rep = estimate_harmonic_measure(g, v, cfg["w"], cfg["r"], cfg["R"], cfg["n"], rng=ctx.seed, threads=ctx.threads)
    return _estimate_outputs(rep, ctx, "harmonic")


# --- oracles ---------------------------------------------------------------------------


def _oracle_outputs(ctx, stem, value, rows=None):
    _formats(ctx, ("csv", "json"), stem)
    if ctx.fmt == "json":
        return {f"{stem}.json": to_json({"value": value} if rows is None else {"rows": rows})}
    if rows is None:
        return {f"{stem}.csv": f"value\n{value}\n"}
    return {f"{stem}.csv": "".join(",".join(map(str, r)) + "\n" for r in rows)}


def run_matrix_tree(cfg, ctx):
    from .lattice import matrix_tree_weight

    g = build_graph(cfg["graph"])
    w = matrix_tree_weight(g, exact=cfg["exact"])
    ctx.say(str(w))
    return _oracle_outputs(ctx, "matrix_tree", str(w))


def run_lerw_law(cfg, ctx):
    from .erasure import laplacian_walk_law

    g = build_graph(cfg["graph"])
    law = laplacian_walk_law(g, cfg["start"], cfg["max_vertices"])
    rows = [("steps", "probability")] + [(" ".join(map(str, k)), str(p)) for k, p in sorted(law.items())]
    for s, p in rows[1:]:
        ctx.say(f"{s}\t{p}")
    return _oracle_outputs(ctx, "lerw_law", None, rows)


def _matchings_rule(d, path):
    if ("hexagon" in d) == ("graph" in d):
        raise ConfigError(path, "give exactly one of 'hexagon' or 'graph'")


HEX = {"a": Field(integer(1)), "b": Field(integer(1)), "c": Field(integer(1))}


def run_matchings(cfg, ctx):
    from .dimer import build_superposition, count_matchings, hexagon

    if "hexagon" in cfg:
        h = cfg["hexagon"]
        n = count_matchings(hexagon(h["a"], h["b"], h["c"]))
    else:
        n = count_matchings(build_superposition(build_graph(cfg["graph"])))
    ctx.say(str(n))
    return _oracle_outputs(ctx, "matchings", n)


def run_macmahon(cfg, ctx):
    from .dimer import macmahon

    n = macmahon(cfg["a"], cfg["b"], cfg["c"])
    ctx.say(str(n))
    return _oracle_outputs(ctx, "macmahon", n)


# --- render --------------------------------------------------------------------------------


def _render_rule(d, path):
    if d["kind"] != "path" and "graph" not in d:
        raise ConfigError(f"{path}.graph" if path else "graph", f"required for kind {d['kind']!r}")


def _read_csv(path: str) -> tuple:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError("input", f"cannot read {path}: {exc.strerror}") from None
    if not lines:
        raise ConfigError("input", f"{path} is empty")
    return lines[0].split(","), [ln.split(",") for ln in lines[1:] if ln]


def _tree_from_csv(g, header, rows, sample):
    from .ust import SpanningTree

    if header != ["tree", "tail", "head", "edge"]:
        raise ConfigError("input", "expected a trees.csv written by sample-ust")
    parent = np.full(g.n, -1, dtype=np.int64)
    for t, tail, _, e in rows:
        if int(t) == sample:
            parent[g.local[int(tail)]] = g.edge_slot[int(e)]
    if np.any(parent < 0):
        raise ConfigError("sample", f"tree {sample} not found or does not match the graph")
    return SpanningTree(g, parent)


def run_render(cfg, ctx):
    from .render import svg_document

    _formats(ctx, ("svg",), "render")
    header, rows = _read_csv(cfg["input"])
    kind = cfg["kind"]
    if kind == "path":
        try:
            pts = np.array([[float(x), float(y)] for x, y in rows])
        except ValueError:
            raise ConfigError("input", "expected x,y rows") from None
        return {"path.svg": svg_document([pts], width=cfg["width"])}
    g = build_graph(cfg["graph"])
    if kind == "tree":
        from .ust import tree_svg

        return {"tree.svg": tree_svg(_tree_from_csv(g, header, rows, cfg["sample"]), cfg["width"])}
    from .dimer import build_superposition, height_faces, matching_svg, tree_to_dimer
    from .render import svg_heat

    sup = build_superposition(g)
    if kind == "matching":
        return {"matching.svg": matching_svg(tree_to_dimer(_tree_from_csv(g, header, rows, cfg["sample"]), sup), cfg["width"])}
    if header != ["sample", "face", "x", "y", "height"]:
        raise ConfigError("input", "expected a heights.csv written by height")
    quads = height_faces(sup)
    vals = {int(f): float(h) for s, f, _, _, h in rows if int(s) == cfg["sample"]}
    if sorted(vals) != list(range(len(quads))):
        raise ConfigError("sample", "height sample does not match the graph")
    return {"height.svg": svg_heat([sup.pos[list(q)] for q in quads], [vals[f] for f in range(len(quads))], cfg["width"])}


# --- registry ------------------------------------------------------------------------------


@dataclass(frozen=True)
class Command:
    schema: dict
    run: Callable
    defaults: dict
    rule: Optional[Callable] = None
    inputs: tuple = ()  # config keys naming input files
    oracle: bool = False


_DISC1 = {"shape": {"kind": "disc", "radius": 1.0}, "marked": [1.0, 0.0], "mesh": 1 / 32}

COMMANDS = {
    "sample-ust": Command(SAMPLE, run_sample_ust, {"graph": {"grid": 3}}),
    "sample-dimer": Command({k: SAMPLE[k] for k in ("graph", "n")}, run_sample_dimer, {"graph": {"grid": 3}}),
    "height": Command({k: SAMPLE[k] for k in ("graph", "n")}, run_height, {"graph": {"grid": 3}}),
    "couple-upper": Command(
        {"coupling": Field(table(COUPLING, _coupling_rule)), "n_runs": Field(integer(1), 200), "install_branch": Field(boolean, True)},
        run_couple_upper,
        {"coupling": {}},
    ),
    "couple-lower": Command({"coupling": Field(table(COUPLING, _coupling_rule)), "n_runs": Field(integer(1), 200)}, run_couple_lower, {"coupling": {}}),
    "annulus": Command(
        {
            "graph": Field(graph_table),
            "pairs": Field(list_of(table(PAIR))),
            "n_runs": Field(integer(1), 1000),
            "exact": Field(boolean, False),
            "max_vertices": Field(integer(1), 9),
        },
        run_annulus,
        {
            "graph": dict(_DISC1, mesh=1 / 16),
            "pairs": [{"outer": {"kind": "disc", "radius": 0.5}, "inner": {"kind": "disc", "radius": 0.25}}],
        },
    ),
    "rn-report": Command(
        {
            "samples1": Field(string(), None),
            "samples2": Field(string(), None),
            "domains": Field(table(STABILITY), None),
            "smoothing": Field(number(nonneg=True), 0.5),
            "C_grid": Field(list_of(number(positive=True), 1), None),
        },
        run_rn_report,
        {},
        _rn_rule,
        inputs=("samples1", "samples2"),
    ),
    "continuity": Command(
        {
            "family": Field(string({"perturbed-disc", "large-domain"}), "perturbed-disc"),
            "values": Field(list_of(number(nonneg=True), 1)),
            "U": Field(shape),
            "mesh": Field(number(positive=True), 1 / 16),
            "n": Field(integer(1), 20_000),
            "k": Field(integer(1), 3),
            "n_sectors": Field(integer(1), 4),
        },
        run_continuity,
        {"values": [0.0, 0.05, 0.1, 0.2], "U": {"kind": "disc", "radius": 0.3}},
    ),
    "height-shift": Command(
        {
            "graph": Field(graph_table),
            "U": Field(shape, None),
            "shift": Field(integer(), 1),
            "n": Field(integer(1), 500),
            "min_count": Field(integer(1), 20),
            "C": Field(number(positive=True), None),
        },
        run_height_shift,
        {"graph": {"grid": 16}},
    ),
    "estimate crossing": Command(
        {
            "graph": Field(graph_table),
            "z": Field(point, [0.0, 0.0]),
            "eps": Field(number(positive=True), 0.25),
            "orientation": Field(string({"h", "v"}), "h"),
            "n": Field(integer(1), 10_000),
        },
        run_crossing,
        {"graph": _DISC1},
    ),
    "estimate beurling": Command(
        {
            "graph": Field(graph_table),
            "center": Field(point, [0.0, 0.0]),
            "r": Field(number_or_list, [0.05, 0.1, 0.2]),
            "R": Field(number(positive=True), 0.8),
            "angle": Field(number(), 0.0),
            "n": Field(integer(1), 10_000),
        },
        run_beurling,
        {"graph": _DISC1},
    ),
    "estimate harmonic": Command(
        {
            "graph": Field(graph_table),
            "start": Field(point, [0.0, 0.0]),
            "w": Field(point, [0.7648421872844885, 0.644217687237691]),  # angle 0.7, off the lattice axes
            "r": Field(number(positive=True), 0.5),
            "R": Field(number(positive=True), 0.75),
            "n": Field(integer(1), 10_000),
        },
        run_harmonic,
        {"graph": _DISC1},
    ),
    "oracle matrix-tree": Command({"graph": Field(graph_table), "exact": Field(boolean, True)}, run_matrix_tree, {"graph": {"grid": 2}}, oracle=True),
    "oracle lerw-law": Command(
        {"graph": Field(graph_table), "start": Field(integer(0), 0), "max_vertices": Field(integer(1), 12)},
        run_lerw_law,
        {"graph": {"grid": 2}},
        oracle=True,
    ),
    "oracle matchings": Command(
        {"hexagon": Field(table(HEX), None), "graph": Field(graph_table, None)}, run_matchings, {}, _matchings_rule, oracle=True
    ),
    "oracle macmahon": Command(HEX, run_macmahon, {}, oracle=True),
    "render": Command(
        {
            "input": Field(string()),
            "kind": Field(string({"tree", "matching", "height", "path"}), "tree"),
            "graph": Field(graph_table, None),
            "sample": Field(integer(0), 0),
            "width": Field(integer(16), 600),
        },
        run_render,
        {},
        _render_rule,
        inputs=("input",),
    ),
}

def resolve_config(command: str, doc: Optional[dict]) -> dict:
    """Fill top-level defaults, then validate strictly."""
    cmd = COMMANDS[command]
    full = dict(cmd.defaults)
    full.update(doc or {})
    out = validate(full, cmd.schema, "", cmd.rule)
    if command == "rn-report" and "C_grid" not in out:
        from .stats import DEFAULT_C_GRID

        out["C_grid"] = list(DEFAULT_C_GRID)
    return out


def load_config(path) -> dict:
    import tomli

    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("--config", f"{path}: {exc}") from None


def _parse_value(text: str):
    import tomli

    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_override(doc: dict, assignment: str):
    """``a.b.c=value`` with value parsed as a TOML value (bare words become strings)."""
    if "=" not in assignment:
        raise ConfigError("--set", f"expected key=value, got {assignment!r}")
    key, val = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(key, "is not a table")
    node[parts[-1]] = _parse_value(val.strip())


# --- runs and manifests ---------------------------------------------------------------------


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_key(identity: dict) -> str:
    return sha256_bytes(dumps(_clean(identity)).encode())[:16]


def execute(command: str, doc: Optional[dict], seed: int = 0, threads: int = 1, fmt: str = "csv", out_root=None, out_dir=None) -> tuple:
    """Validate, run, write outputs and the manifest. Returns (run_dir, manifest, stdout_lines)."""
    if fmt not in FORMATS:
        raise ConfigError("format", f"must be one of {FORMATS}")
    if not (0 <= seed < 2**64):
        raise ConfigError("seed", "must be an unsigned 64-bit integer")
    if threads < 1:
        raise ConfigError("threads", "must be >= 1")
    cmd = COMMANDS[command]
    cfg = resolve_config(command, doc)
    inputs = {}
    for key in cmd.inputs:
        if key in cfg:
            try:
                inputs[cfg[key]] = sha256_file(cfg[key])
            except OSError as exc:
                raise ConfigError(key, f"cannot read {cfg[key]}: {exc.strerror}") from None
    identity = {"command": command, "config": cfg, "seed": seed, "threads": threads, "format": fmt, "version": __version__, "inputs": inputs}
    key = run_key(identity)
    started = _now()
    ctx = Context(seed, threads, fmt, [])
    outputs = cmd.run(cfg, ctx)
    if out_dir is None:
        root = Path(out_root or os.environ.get(OUT_ENV) or DEFAULT_OUT)
        out_dir = root / f"{command.replace(' ', '-')}-{key}"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digests = {}
    for name, text in sorted(outputs.items()):
        data = text.encode()
        (out_dir / name).write_bytes(data)
        digests[name] = sha256_bytes(data)
    manifest = dict(identity, key=key, started=started, finished=_now(), outputs=digests)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out_dir, manifest, ctx.stdout


def replay(manifest_path, out_dir=None, threads: Optional[int] = None) -> tuple:
    """Re-run a manifest; returns (ok, {file: (expected, got)})."""
    m = json.loads(Path(manifest_path).read_text())
    if m.get("version") != __version__:
        print(f"note: manifest written by version {m.get('version')}, running {__version__}", file=sys.stderr)
    for path, digest in m.get("inputs", {}).items():
        if not Path(path).exists() or sha256_file(path) != digest:
            raise ConfigError("inputs", f"{path} changed since the recorded run")
    if out_dir is None:
        out_dir = tempfile.mkdtemp(prefix="ustmix-replay-")
    d, m2, _ = execute(m["command"], m["config"], m["seed"], threads or m["threads"], m["format"], out_dir=out_dir)
    diff = {}
    for name in sorted(set(m["outputs"]) | set(m2["outputs"])):
        a, b = m["outputs"].get(name), m2["outputs"].get(name)
        diff[name] = (a, b)
    ok = all(a == b for a, b in diff.values())
    return ok, diff, d


# --- argument parsing --------------------------------------------------------------------


def _common(p):
    p.add_argument("--config", help="TOML config document")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config field (dotted path)")
    p.add_argument("--seed", type=int, default=0, help="master seed (u64)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--format", choices=FORMATS, default="csv")


def _hex_flags(p, required):
    for k in "abc":
        p.add_argument(f"--{k}", type=int, required=required)


def _grid_flag(p):
    p.add_argument("--grid", type=int, help="use the k x k wired grid")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ustmix", description="Wired USTs, loop-erased walks, dimers and domain couplings.")
    ap.add_argument("--version", action="version", version=f"ustmix {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("sample-ust", "sample-dimer", "height", "couple-upper", "couple-lower", "annulus", "rn-report", "continuity", "height-shift", "render"):
        p = sub.add_parser(name)
        _common(p)
        if name in ("sample-ust", "sample-dimer", "height"):
            _grid_flag(p)
            p.add_argument("-n", type=int, help="number of samples")
    for group, names in (("estimate", ("crossing", "beurling", "harmonic")), ("oracle", ("matrix-tree", "lerw-law", "matchings", "macmahon"))):
        gp = sub.add_parser(group)
        gsub = gp.add_subparsers(dest="sub", required=True)
        for name in names:
            p = gsub.add_parser(name)
            _common(p)
            if name == "macmahon":
                _hex_flags(p, True)
            elif name == "matchings":
                _hex_flags(p, False)
                _grid_flag(p)
            elif group == "oracle":
                _grid_flag(p)
    p = sub.add_parser("replay", help="re-run a manifest and compare outputs")
    p.add_argument("manifest")
    p.add_argument("--out", help="directory for the replayed outputs (default: a fresh temporary directory)")
    p.add_argument("--threads", type=int)
    return ap


def _doc_from_args(name: str, args) -> dict:
    doc = load_config(args.config) if args.config else {}
    if getattr(args, "grid", None) is not None:
        doc["graph"] = {"grid": args.grid}
    if getattr(args, "n", None) is not None:
        doc["n"] = args.n
    if name in ("oracle macmahon", "oracle matchings") and args.a is not None:
        vals = {k: getattr(args, k) for k in "abc"}
        if None in vals.values():
            raise ConfigError("--a/--b/--c", "give all three sides")
        if name == "oracle macmahon":
            doc.update(vals)
        else:
            doc["hexagon"] = vals
    for s in args.set:
        apply_override(doc, s)
    return doc


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    if args.command == "replay":
        try:
            ok, diff, d = replay(args.manifest, args.out, args.threads)
        except ConfigError as exc:
            print(f"ustmix replay: config error: {exc}", file=sys.stderr)
            return 2
        for name, (a, b) in diff.items():
            print(f"{'identical' if a == b else 'DIFFERS'}  {name}")
        print(f"replayed into {d}", file=sys.stderr)
        return 0 if ok else 1
    name = args.command if args.command not in ("estimate", "oracle") else f"{args.command} {args.sub}"
    try:
        doc = _doc_from_args(name, args)
        d, _, lines = execute(name, doc, args.seed, args.threads, args.format, out_root=args.out)
    except ConfigError as exc:
        print(f"ustmix {name}: config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"ustmix {name}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for line in lines:
        print(line)
    print(f"run: {d}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
