"""Command-line driver: ``claps graph | run | bound | simulate``.

Exit codes: 0 success, 1 certified failure (the target probability is below the
requested threshold, or a soundness check failed), 2 usage or configuration
error. Every output file is written atomically.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .absgraph import AbstractGraph, InvalidGraphError, compile_to_graph, export_dot, summary_table
from .artifacts import atomic_write_text, csv_text, sha256_bytes, sha256_file, svg_trajectories
from .composition import (ClapsResult, EdgeSolution, SolutionStore, compose, learned_edge_solver,
                          mc_composed, run_claps, stub_edge_solver)
from .config import ConfigError, Settings, load_settings
from .nn import load_net
from .ninerooms import nine_rooms_graph, read_edge_table
from .rasm import Certificate, CertificateInvalidError, DomainError, compute_bound
from .spectrl import DimensionError, SpecSyntaxError, UnknownRegionError, parse_spec, to_text
from .system import InvalidTaskError, mc_reach_avoid, simulate, trajectory_csv

log = logging.getLogger("claps")

MANIFEST_FORMAT = "claps-manifest"
MANIFEST_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "CLAPS_THREADS"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------

def _settings(args) -> Settings:
    if not args.config:
        raise UsageError("--config is required")
    return load_settings(args.config)


def _spec_text(raw: str) -> str:
    p = Path(raw)
    if "\n" not in raw and len(raw) < 4096 and p.is_file():
        return p.read_text(encoding="utf-8")
    return raw


def system_json(settings: Settings) -> str:
    """Canonical system description; its sha256 is the certificates' system hash."""
    return json.dumps(settings.system.describe(), sort_keys=True, separators=(",", ":"))


def build_graph(settings: Settings, spec: str | None) -> tuple[AbstractGraph, str]:
    """Graph from ``--spec``, the config's ``[run] spec`` or its explicit ``[graph]``."""
    spec = spec if spec is not None else settings.run.get("spec")
    if spec is None:
        if settings.graph.get("kind", "").strip() == "rooms":
            G = nine_rooms_graph(settings)
            return G, "rooms:" + G.digest()
        raise UsageError("no specification: pass --spec or set [run] spec or [graph] kind = rooms")
    text = _spec_text(spec)
    formula = parse_spec(text, settings.regions)
    if settings.task is not None:
        initial = settings.task.initial
    elif "init" in settings.regions:
        initial = settings.regions["init"]
    else:
        raise UsageError("the config names no initial region ([task] initial or region 'init')")
    if initial.dim != settings.system.dim:
        raise DimensionError("regions and state space disagree on dimension")
    return compile_to_graph(formula, initial, settings.system.state_space), to_text(formula)


def _stub_table(path, G: AbstractGraph) -> dict:
    table = {}
    try:
        rows = read_edge_table(path)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"malformed stub table {path}: {exc}") from None
    for s, g, p in rows:
        if (s, g) not in G.edge_regions:
            raise UsageError(f"stub edge {s}->{g} is not an edge of the graph")
        if not 0.0 <= p <= 1.0:
            raise UsageError(f"stub probability {p} outside [0, 1]")
        table[(s, g)] = p
    return table


def _training(settings: Settings, args):
    cfg = settings.training
    kw = {}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    elif "seed" in settings.run:
        kw["seed"] = int(settings.run["seed"])
    if getattr(args, "timeout", None) is not None:
        kw["timeout"] = args.timeout
    if getattr(args, "mesh", None) is not None:
        kw["mesh"] = args.mesh
    return cfg.override(**kw) if kw else cfg


def _threshold(settings: Settings, args) -> float:
    p = args.p if args.p is not None else float(settings.run.get("p", "nan"))
    if not 0.0 < p < 1.0:
        raise UsageError("p must lie in (0, 1); pass --p or set [run] p")
    return p


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_graph(args) -> int:
    settings = _settings(args)
    G, _ = build_graph(settings, args.spec)
    dot = export_dot(G)
    out = Path(args.out)
    atomic_write_text(out / "graph.dot", dot)
    atomic_write_text(out / "graph.tsv", summary_table(G))
    sys.stdout.write(dot)
    sys.stdout.write("\n")
    sys.stdout.write(summary_table(G))
    return EXIT_OK


def _prob_dump(res: ClapsResult) -> str:
    G = res.graph
    lines = ["vertex\tprob"]
    lines += [f"{v}\t{res.prob[v]:.6f}" for v in res.forward.order]
    lines.append("solver calls: " + ", ".join(G.edge_id(e) for e in res.forward.calls))
    lines.append("never solved: " + ", ".join(G.edge_id(e) for e in res.forward.unsolved(G)))
    return "\n".join(lines) + "\n"


def _write_trajectories(out: Path, settings: Settings, res: ClapsResult, seed: int,
                        episodes: int = 20, horizon: int = 400):
    if res.policy is None or settings.system.dim != 2:
        return None
    G = res.graph
    mc, (xs, _) = mc_composed(settings.system, res.policy, horizon, episodes, seed)
    rects = []
    for e in zip(res.path[:-1], res.path[1:]):
        for b in G.edge_regions[e].complement_within(settings.system.state_space).boxes:
            rects.append((b.lo, b.hi, "#bbbbbb"))
    for v in res.path:
        for b in G.vertex_regions[v].boxes:
            rects.append((b.lo, b.hi, "#2ca02c" if v == G.target else "#ffdd57"))
    space = settings.system.state_space
    svg = svg_trajectories(space.lo, space.hi, rects, [xs[:, i] for i in range(xs.shape[1])])
    atomic_write_text(out / "trajectories.svg", svg)
    return mc


def cmd_run(args) -> int:
    settings = _settings(args)
    G, spec_key = build_graph(settings, args.spec)
    p = _threshold(settings, args)
    cfg = _training(settings, args)
    out = Path(args.out)
    sys_text = system_json(settings)
    atomic_write_text(out / "system.json", sys_text)
    store = SolutionStore(out / "edges", sha256_bytes(sys_text.encode()))
    if args.stub_edges:
        solver = stub_edge_solver(G, _stub_table(args.stub_edges, G))
        store = None
    else:
        solver = learned_edge_solver(settings.system, G, cfg)
    res = run_claps(settings.system, G, p, cfg, edge_solver=solver, store=store)
    solutions = res.forward.solutions
    edges = []
    for e, sol in solutions.items():
        rec = {"edge": list(e), "id": G.edge_id(e), "probability": sol.probability}
        if store is not None:
            d = store._dir(G, e)
            for key, name in (("certificate", "certificate.txt"), ("policy", "policy.bin"),
                              ("certificate_net", "certificate_net.bin")):
                if (d / name).exists():
                    rec[key] = str((d / name).relative_to(out))
        edges.append(rec)
    atomic_write_text(out / "summary.csv", csv_text(
        ["start", "goal", "certified_probability"],
        [(e[0], e[1], solutions[e].probability) for e in G.edges if e in solutions]))
    atomic_write_text(out / "graph.dot", export_dot(G))
    mc = _write_trajectories(out, settings, res, cfg.seed) if res.success else None
    manifest = {
        "format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "claps_version": __version__,
        "spec": spec_key, "spec_hash": sha256_bytes(spec_key.encode()),
        "config": str(Path(args.config).resolve()), "config_hash": sha256_file(args.config),
        "system_file": "system.json", "p": p, "seed": cfg.seed, "stub": bool(args.stub_edges),
        "graph": G.to_json(), "graph_digest": G.digest(),
        "prob": {v: res.prob[v] for v in G.vertices},
        "calls": [G.edge_id(e) for e in res.forward.calls],
        "success": res.success, "bound": res.bound, "path": res.path, "edges": edges,
        "rollouts": None if mc is None else {"episodes": mc.episodes, "estimate": mc.estimate},
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    if not res.success:
        sys.stderr.write(f"target probability {res.bound:.6f} is below p = {p}\n")
        sys.stderr.write(_prob_dump(res))
        print(f"FAILURE bound={res.bound:.6f}")
        return EXIT_FAIL
    print(f"SUCCESS bound={res.bound:.6f} path={' -> '.join(res.path)}")
    return EXIT_OK


def cmd_bound(args) -> int:
    b = compute_bound(args.lam, args.gamma, args.L_V, args.delta, caption_mode=args.caption_mode)
    N = int(b.N) if float(b.N).is_integer() else b.N
    print(f"N = {N}")
    print(f"bound = {b.bound:.10g}" + (" (saturated)" if b.saturated else ""))
    print(f"prior bound = {b.prior:.10g}")
    return EXIT_OK


def _load_from_manifest(path: Path):
    try:
        m = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read manifest: {exc}") from None
    if m.get("format") != MANIFEST_FORMAT or m.get("version") != MANIFEST_VERSION:
        raise UsageError("unsupported manifest format")
    if not m.get("success") or not m.get("path"):
        raise UsageError("the manifest records no certified path")
    G = AbstractGraph.from_json(m["graph"])
    root = path.parent
    sols = {}
    for rec in m["edges"]:
        e = tuple(rec["edge"])
        if "policy" not in rec:
            continue
        pol = load_net(root / rec["policy"])
        sols[e] = EdgeSolution(e, float(rec["probability"]), None, pol)
    path_v = m["path"]
    for e in zip(path_v[:-1], path_v[1:]):
        if e not in sols:
            raise UsageError(f"missing policy artifact for edge {G.edge_id(e)}")
    return m, G, compose(G, path_v, sols)


def cmd_simulate(args) -> int:
    settings = _settings(args)
    if args.manifest:
        m, G, policy = _load_from_manifest(Path(args.manifest))
        bound = float(m["bound"])
        mc, (xs, us) = mc_composed(settings.system, policy, args.horizon, args.episodes, args.seed)
        if args.csv:
            atomic_write_text(Path(args.csv), trajectory_csv(xs, us))
    else:
        if not (args.policy and args.certificate):
            raise UsageError("pass --manifest, or --policy with --certificate")
        if settings.task is None:
            raise UsageError("the config has no [task] section")
        for f in (args.policy, args.certificate):
            if not Path(f).is_file():
                raise UsageError(f"missing artifact {f}")
        policy = load_net(args.policy)
        cert = Certificate.load(args.certificate)
        bound = cert.bound
        task = settings.task
        mc = mc_reach_avoid(settings.system, policy, task, args.horizon, args.episodes, args.seed)
        if args.csv:
            rng = np.random.default_rng(args.seed)
            xs, us = simulate(settings.system, policy, task.initial.sample(rng, 1), args.horizon, rng)
            atomic_write_text(Path(args.csv), trajectory_csv(xs, us))
    ok = mc.consistent_with_bound(bound)
    print(f"episodes = {mc.episodes} successes = {mc.successes}")
    print(f"estimate = {mc.estimate:.6f} {int(round(100 * (1 - mc.alpha)))}% CI = "
          f"[{mc.lower:.6f}, {mc.upper:.6f}]")
    print(f"bound = {bound:.6f} <= upper: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="claps", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("graph", help="compile a specification and print the abstract graph")
    g.add_argument("--config", required=True)
    g.add_argument("--spec")
    g.add_argument("--out", default=".")
    g.set_defaults(fn=cmd_graph)

    r = sub.add_parser("run", help="synthesize and certify a compositional policy")
    r.add_argument("--config", required=True)
    r.add_argument("--spec")
    r.add_argument("--p", type=float)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", default="claps_out")
    r.add_argument("--stub-edges", help="CSV of start,goal,probability replayed instead of training")
    r.add_argument("--timeout", type=float, help="seconds per edge")
    r.add_argument("--mesh", type=float, help="verifier grid mesh")
    r.set_defaults(fn=cmd_run)

    b = sub.add_parser("bound", help="evaluate the reach-avoid probability bound")
    b.add_argument("--lam", type=float, required=True)
    b.add_argument("--gamma", type=float, required=True)
    b.add_argument("--L_V", "--lv", dest="L_V", type=float, default=1.0)
    b.add_argument("--delta", type=float, default=0.1, help="per-step bound")
    b.add_argument("--caption-mode", action="store_true", help="use the exponent 2*lambda")
    b.set_defaults(fn=cmd_bound)

    s = sub.add_parser("simulate", help="Monte Carlo check of a certified bound")
    s.add_argument("--config", required=True)
    s.add_argument("--manifest")
    s.add_argument("--policy")
    s.add_argument("--certificate")
    s.add_argument("--episodes", type=int, default=10_000)
    s.add_argument("--horizon", type=int, default=400)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--csv", help="write one sampled trajectory as CSV")
    s.set_defaults(fn=cmd_simulate)
    return ap


def _set_threads():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return
    try:
        import numba
        numba.set_num_threads(max(1, min(int(raw), numba.config.NUMBA_NUM_THREADS)))
    except (ImportError, ValueError):
        pass


def main(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads()
    try:
        return args.fn(args)
    except SpecSyntaxError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
    except (UsageError, ConfigError, DomainError, DimensionError, UnknownRegionError,
            InvalidGraphError, InvalidTaskError, CertificateInvalidError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
