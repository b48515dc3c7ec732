"""Compositional synthesis over an abstract graph: the topological forward pass
with on-demand edge solving, path extraction, the switching controller and the
end-to-end driver with a persistent store of edge solutions."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .absgraph import AbstractGraph, Edge, compile_to_graph, topo_sort
from .artifacts import atomic_write_bytes, atomic_write_text, sha256_bytes
from .learnverify.config import TrainConfig
from .nn import Mlp, forward, net_bytes, net_from_bytes
from .rasm import Certificate
from .spectrl import Region, SpectrlFormula
from .system import InvalidTaskError, McResult, ReachAvoidTask, StochasticSystem, clopper_pearson, simulate

log = logging.getLogger(__name__)

PROB_TOL = 1e-12


class NoPathError(ValueError):
    pass


class MissingSolutionError(KeyError):
    pass


@dataclass
class EdgeSolution:
    edge: Edge
    probability: float
    certificate: Certificate | None = None
    policy: Mlp | None = None
    V: Mlp | None = None

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("edge probability must lie in [0, 1]")
        if self.certificate is not None and abs(self.certificate.bound - self.probability) > 1e-12:
            raise ValueError("edge probability must equal the certificate bound")


EdgeSolver = Callable[[Edge], "EdgeSolution | None"]


def edge_task(G: AbstractGraph, edge: Edge, space) -> ReachAvoidTask:
    """Reach-avoid task of an edge: from the source region to the goal region,
    unsafe outside the edge region."""
    v, w = edge
    return ReachAvoidTask(G.vertex_regions[v], G.vertex_regions[w],
                          G.edge_regions[edge].complement_within(space))


# ---------------------------------------------------------------------------
# Forward pass and path extraction
# ---------------------------------------------------------------------------

@dataclass
class ForwardPass:
    prob: dict[str, float]
    solutions: dict[Edge, EdgeSolution]
    calls: list[Edge] = field(default_factory=list)   # solver invocations in order
    order: list[str] = field(default_factory=list)

    def __iter__(self):
        yield self.prob
        yield self.solutions

    def unsolved(self, G: AbstractGraph) -> list[Edge]:
        seen = set(self.calls)
        return [e for e in G.edges if e not in seen]


def forward_pass(G: AbstractGraph, p: float, edge_solver: EdgeSolver) -> ForwardPass:
    """Probabilities of reaching each vertex through certified edges.

    Vertices are visited in topological order; the out-edges of ``v`` are
    solved only when ``Prob[v] >= p``, and each edge at most once. An edge the
    solver cannot handle (``None``) contributes probability 0.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    order = topo_sort(G)
    prob = {v: 0.0 for v in G.vertices}
    prob[G.source] = 1.0
    solutions: dict[Edge, EdgeSolution] = {}
    calls: list[Edge] = []
    for v in order:
        if prob[v] < p or prob[v] <= 0.0:
            continue
        for w in G.successors(v):
            e = (v, w)
            if e not in solutions:
                calls.append(e)
                sol = edge_solver(e)
                solutions[e] = sol if sol is not None else EdgeSolution(e, 0.0)
            prob[w] = max(prob[w], solutions[e].probability * prob[v])
    return ForwardPass(prob, solutions, calls, order)


def extract_path(G: AbstractGraph, prob: dict[str, float],
                 solutions: dict[Edge, EdgeSolution]) -> list[str]:
    """Walk back from the target through predecessors realizing ``Prob``.

    Among predecessors with ``Prob[u] * p(u, v) == Prob[v]`` the one earliest in
    topological order is taken.
    """
    if prob.get(G.target, 0.0) <= 0.0:
        raise NoPathError("the target has probability 0; no certified path")
    index = {v: i for i, v in enumerate(topo_sort(G))}
    path = [G.target]
    v = G.target
    while v != G.source:
        cands = []
        for u in G.predecessors(v):
            sol = solutions.get((u, v))
            if sol is None or prob.get(u, 0.0) <= 0.0:
                continue
            val = sol.probability * prob[u]
            if abs(val - prob[v]) <= PROB_TOL * max(1.0, prob[v]):
                cands.append(u)
        if not cands:
            raise NoPathError(f"no predecessor of {v} realizes its probability")
        v = min(cands, key=index.get)
        path.append(v)
    return path[::-1]


# ---------------------------------------------------------------------------
# Switching controller
# ---------------------------------------------------------------------------

class CompositionalPolicy:
    """Follows the edge policies along ``path``, one episode per batch row.

    On observing a state in the region of the next path vertex the controller
    advances to the following edge; a state outside the current edge region
    sets the failed flag, after which the current edge policy is followed
    indefinitely.
    """

    def __init__(self, G: AbstractGraph, path: list[str], solutions: dict[Edge, EdgeSolution]):
        if len(path) < 1 or path[0] != G.source:
            raise ValueError("path must start at the source")
        self.G, self.path = G, list(path)
        self.edges = list(zip(path[:-1], path[1:]))
        self.policies = []
        for e in self.edges:
            sol = solutions.get(e)
            if sol is None or sol.policy is None:
                raise MissingSolutionError(f"no solved policy for edge {e}")
            self.policies.append(sol.policy)
        self.reset(1)

    def reset(self, n: int = 1):
        self.index = np.zeros(n, np.int64)
        self.failed = np.zeros(n, dtype=bool)
        self.steps = 0
        self.switches: list[tuple[int, int, int]] = []   # (step, row, new edge index)

    @property
    def mode(self) -> tuple[int, bool]:
        """Edge index and failed flag of the first episode."""
        return int(self.index[0]), bool(self.failed[0])

    @property
    def finished(self) -> np.ndarray:
        return self.index >= len(self.edges)

    def observe(self, x: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if len(x) != len(self.index):
            self.reset(len(x))
        k = len(self.edges)
        for _ in range(k):
            live = ~self.failed & (self.index < k)
            if not live.any():
                break
            moved = False
            for j in np.unique(self.index[live]):
                rows = np.flatnonzero(live & (self.index == j))
                goal = self.G.vertex_regions[self.path[j + 1]]
                hit = goal.contains_many(x[rows])
                if hit.any():
                    moved = True
                    for r in rows[hit]:
                        self.switches.append((self.steps, int(r), int(j + 1)))
                    self.index[rows[hit]] = j + 1
            if not moved:
                break
        live = ~self.failed & (self.index < k)
        for j in np.unique(self.index[live]):
            rows = np.flatnonzero(live & (self.index == j))
            ok = self.G.edge_regions[self.edges[j]].contains_many(x[rows])
            self.failed[rows[~ok]] = True

    def act(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        self.observe(X)
        u = np.zeros((len(X), self.G.dim))
        use = np.minimum(self.index, len(self.edges) - 1) if self.edges else self.index
        for j in np.unique(use):
            rows = use == j
            if self.edges:
                u[rows] = forward(self.policies[j], X[rows])
        self.steps += 1
        return u[0] if single else u

    __call__ = act


def mc_composed(system: StochasticSystem, policy: CompositionalPolicy, horizon: int,
                episodes: int, seed: int, alpha: float = 0.01, block: int = 1000):
    """Monte Carlo success rate of the composed controller.

    An episode succeeds when the controller has advanced through every path
    edge, in order and without leaving an edge region, within ``horizon``
    steps. Returns the :class:`McResult` and the (states, actions) of the first block.
    """
    if horizon < 1 or episodes < 1:
        raise ValueError("horizon and episodes must be at least 1")
    G = policy.G
    start = G.vertex_regions[G.source]
    blocks = np.random.SeedSequence(seed).spawn((episodes + block - 1) // block)
    ok = done = 0
    first = None
    for ss in blocks:
        n = min(block, episodes - done)
        rng = np.random.default_rng(ss)
        xs, us = simulate(system, policy, start.sample(rng, n), horizon, rng)
        policy.observe(xs[-1])
        ok += int(policy.finished.sum())
        done += n
        if first is None:
            first = (xs, us)
    lo, hi = clopper_pearson(ok, episodes, alpha)
    return McResult(ok / episodes, lo, hi, ok, episodes, alpha), first


def compose(G: AbstractGraph, path: list[str], solutions: dict[Edge, EdgeSolution]) -> CompositionalPolicy:
    return CompositionalPolicy(G, path, solutions)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text).strip("_") or "edge"


class SolutionStore:
    """Edge solutions on disk, keyed by (graph digest, edge id)."""

    def __init__(self, root, system_hash: str = ""):
        self.root = Path(root)
        self.system_hash = system_hash
        self.hits = 0
        self.misses = 0

    def _dir(self, G: AbstractGraph, e: Edge) -> Path:
        return self.root / G.digest()[:16] / _slug(G.edge_id(e))

    def load(self, G: AbstractGraph, e: Edge) -> EdgeSolution | None:
        d = self._dir(G, e)
        meta = d / "solution.json"
        if not meta.exists():
            self.misses += 1
            return None
        info = json.loads(meta.read_text())
        if info.get("edge") != list(e):
            self.misses += 1
            return None
        cert = Certificate.load(d / "certificate.txt") if (d / "certificate.txt").exists() else None
        pol = net_from_bytes((d / "policy.bin").read_bytes()) if (d / "policy.bin").exists() else None
        V = net_from_bytes((d / "certificate_net.bin").read_bytes()) if (d / "certificate_net.bin").exists() else None
        self.hits += 1
        return EdgeSolution(e, float(info["probability"]), cert, pol, V)

    def save(self, G: AbstractGraph, sol: EdgeSolution) -> Path:
        d = self._dir(G, sol.edge)
        d.mkdir(parents=True, exist_ok=True)
        hashes = {"system_hash": self.system_hash}
        if sol.policy is not None:
            data = net_bytes(sol.policy)
            atomic_write_bytes(d / "policy.bin", data)
            hashes["policy_hash"] = sha256_bytes(data)
        if sol.V is not None:
            data = net_bytes(sol.V)
            atomic_write_bytes(d / "certificate_net.bin", data)
            hashes["certificate_hash"] = sha256_bytes(data)
        if sol.certificate is not None:
            sol.certificate = sol.certificate.with_hashes(**hashes)
            sol.certificate.save(d / "certificate.txt")
        info = {"edge": list(sol.edge), "edge_id": G.edge_id(sol.edge),
                "probability": sol.probability, "graph": G.digest()}
        atomic_write_text(d / "solution.json", json.dumps(info, indent=2, sort_keys=True) + "\n")
        return d


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def learned_edge_solver(system: StochasticSystem, G: AbstractGraph, config: TrainConfig) -> EdgeSolver:
    """Edge solver running the binary search over certified probabilities."""
    from .learnverify.search import max_verified_probability

    def solve(e: Edge) -> EdgeSolution | None:
        if e in G.unsatisfiable:
            return EdgeSolution(e, 0.0)
        try:
            task = edge_task(G, e, system.state_space)
        except InvalidTaskError as exc:
            log.info("edge %s: no valid task (%s)", G.edge_id(e), exc)
            return EdgeSolution(e, 0.0)
        r = max_verified_probability(system, task, config.precision, config)
        if r.certificate is None:
            log.info("edge %s: no certificate", G.edge_id(e))
            return EdgeSolution(e, 0.0, None, r.policy, r.V)
        log.info("edge %s: certified %.4f", G.edge_id(e), r.certificate.bound)
        return EdgeSolution(e, r.certificate.bound, r.certificate, r.policy, r.V)

    return solve


def stub_edge_solver(G: AbstractGraph, table: dict[Edge, float], policy_factory=None) -> EdgeSolver:
    """Edge solver replaying fixed probabilities (missing edges get 0)."""

    def solve(e: Edge) -> EdgeSolution:
        pol = policy_factory(e) if policy_factory is not None else None
        return EdgeSolution(e, float(table.get(e, 0.0)), None, pol)

    return solve


def persistent(solver: EdgeSolver, store: SolutionStore, G: AbstractGraph) -> EdgeSolver:
    """Wrap ``solver`` so results are read from and written to ``store``."""

    def solve(e: Edge) -> EdgeSolution | None:
        sol = store.load(G, e)
        if sol is not None:
            return sol
        sol = solver(e)
        if sol is not None:
            store.save(G, sol)
        return sol

    return solve


@dataclass
class ClapsResult:
    success: bool
    bound: float
    graph: AbstractGraph
    forward: ForwardPass
    path: list[str] | None = None
    policy: CompositionalPolicy | None = None

    @property
    def prob(self) -> dict[str, float]:
        return self.forward.prob

    @property
    def certificates(self) -> dict[Edge, Certificate]:
        return {e: s.certificate for e, s in self.forward.solutions.items() if s.certificate is not None}


def run_claps(system: StochasticSystem, spec: SpectrlFormula | AbstractGraph, p: float,
              config: TrainConfig | None = None, initial: Region | None = None,
              edge_solver: EdgeSolver | None = None, store: SolutionStore | None = None) -> ClapsResult:
    """Compile (or take) the abstract graph, run the forward pass and compose.

    With ``store`` set, edge solutions are memoized on disk. The result carries
    the composed policy only when ``Prob[t] >= p``; otherwise it still holds the
    full probability map for diagnostics.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    config = config or TrainConfig()
    if isinstance(spec, AbstractGraph):
        G = spec
    else:
        if initial is None:
            raise ValueError("compiling a formula needs the initial region")
        G = compile_to_graph(spec, initial, system.state_space)
    solver = edge_solver or learned_edge_solver(system, G, config)
    if store is not None:
        solver = persistent(solver, store, G)
    fp = forward_pass(G, p, solver)
    bound = fp.prob[G.target]
    if bound < p:
        log.info("target probability %.4f below threshold %.4f", bound, p)
        return ClapsResult(False, bound, G, fp)
    path = extract_path(G, fp.prob, fp.solutions)
    policy = None
    if all(fp.solutions[e].policy is not None for e in zip(path[:-1], path[1:])):
        policy = compose(G, path, fp.solutions)
    return ClapsResult(True, bound, G, fp, path, policy)
