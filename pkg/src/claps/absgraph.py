"""Abstract graphs: compilation from SpectRL, topological order, abstract
reachability of finite trajectories, DOT export and serialization."""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .spectrl import (
    Achieve,
    Box,
    DimensionError,
    Ensuring,
    Or,
    Region,
    Seq,
    SpectrlFormula,
)


class InvalidGraphError(ValueError):
    pass


class UnsatisfiableEdgeWarning(UserWarning):
    pass


Edge = tuple[str, str]


@dataclass(frozen=True)
class AbstractGraph:
    vertices: tuple[str, ...]
    edges: tuple[Edge, ...]
    vertex_regions: Mapping[str, Region]
    edge_regions: Mapping[Edge, Region]
    source: str
    target: str
    labels: Mapping[str, str] = field(default_factory=dict)
    unsatisfiable: frozenset = frozenset()

    def __post_init__(self):
        vs = set(self.vertices)
        if len(vs) != len(self.vertices):
            raise InvalidGraphError("duplicate vertex names")
        for u, v in self.edges:
            if u not in vs or v not in vs:
                raise InvalidGraphError(f"edge ({u}, {v}) has a missing endpoint")
        if self.source not in vs or self.target not in vs:
            raise InvalidGraphError("source and target must be vertices")
        if len(set(self.edges)) != len(self.edges):
            raise InvalidGraphError("duplicate edges")

    @property
    def dim(self) -> int:
        return self.vertex_regions[self.source].dim

    @property
    def has_warnings(self) -> bool:
        return bool(self.unsatisfiable)

    def successors(self, v: str) -> list[str]:
        return [b for a, b in self.edges if a == v]

    def predecessors(self, v: str) -> list[str]:
        return [a for a, b in self.edges if b == v]

    def edge_id(self, e: Edge) -> str:
        return f"{e[0]}->{e[1]}"

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "vertices": list(self.vertices),
            "edges": [list(e) for e in self.edges],
            "source": self.source,
            "target": self.target,
            "vertex_regions": {v: self.vertex_regions[v].to_json() for v in self.vertices},
            "edge_regions": [self.edge_regions[e].to_json() for e in self.edges],
            "labels": {v: self.labels[v] for v in self.vertices if v in self.labels},
            "unsatisfiable": sorted([list(e) for e in self.unsatisfiable]),
        }

    @classmethod
    def from_json(cls, data: dict) -> "AbstractGraph":
        dim = data["dim"]
        edges = tuple(tuple(e) for e in data["edges"])
        return cls(
            vertices=tuple(data["vertices"]),
            edges=edges,
            vertex_regions={v: Region.from_json(r, dim) for v, r in data["vertex_regions"].items()},
            edge_regions={e: Region.from_json(r, dim) for e, r in zip(edges, data["edge_regions"])},
            source=data["source"],
            target=data["target"],
            labels=dict(data.get("labels", {})),
            unsatisfiable=frozenset(tuple(e) for e in data.get("unsatisfiable", [])),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Compilation
# ---------------------------------------------------------------------------

class _Builder:
    def __init__(self, space: Box):
        self.space = space
        self.full = Region.of(space)
        self.vregion: dict[str, Region] = {}
        self.label: dict[str, str] = {}
        self.eregion: dict[Edge, Region] = {}
        self.count = 0

    def vertex(self, region: Region, label: str) -> str:
        name = f"v{self.count}"
        self.count += 1
        self.vregion[name] = region
        self.label[name] = label
        return name

    def out_edges(self, v):
        return [e for e in self.eregion if e[0] == v]

    def drop_vertex(self, v):
        for e in [e for e in self.eregion if v in e]:
            del self.eregion[e]
        del self.vregion[v]
        del self.label[v]

    def build(self, f: SpectrlFormula):
        """Subgraph for ``f`` as (source, edges, targets); targets are sinks."""
        if isinstance(f, Achieve):
            s = self.vertex(self.full, "start")
            t = self.vertex(f.pred.to_region(self.space), str(f.pred))
            self.eregion[(s, t)] = self.full
            return s, {(s, t)}, [t]
        if isinstance(f, Ensuring):
            s, edges, targets = self.build(f.body)
            keep = f.pred.to_region(self.space)
            for e in edges:
                self.eregion[e] = self.eregion[e].intersect(keep)
            return s, edges, targets
        if isinstance(f, Seq):
            s1, e1, t1 = self.build(f.first)
            s2, e2, t2 = self.build(f.second)
            edges = set(e1)
            # every target of the first part inherits the start edges of the second,
            # keeping its own region
            for _, w in sorted(self.out_edges(s2)):
                region = self.eregion[(s2, w)]
                for t in t1:
                    self.eregion[(t, w)] = region
                    edges.add((t, w))
            edges |= {e for e in e2 if e[0] != s2}
            self.drop_vertex(s2)
            return s1, edges, t2
        if isinstance(f, Or):
            s1, e1, t1 = self.build(f.left)
            s2, e2, t2 = self.build(f.right)
            s = self.vertex(self.full, "start")
            edges = {e for e in e1 | e2 if e[0] not in (s1, s2)}
            for old in (s1, s2):
                for _, w in sorted(self.out_edges(old)):
                    self.eregion[(s, w)] = self.eregion[(old, w)]
                    edges.add((s, w))
                self.drop_vertex(old)
            return s, edges, t1 + t2
        raise TypeError(f"not a formula: {f!r}")


def compile_to_graph(formula: SpectrlFormula, initial: Region, state_space: Box) -> AbstractGraph:
    """Translate ``formula`` into an abstract graph whose source carries ``initial``.

    Edges whose safety region becomes empty are kept and listed in
    ``unsatisfiable``; a :class:`UnsatisfiableEdgeWarning` is emitted.
    """
    if initial.is_empty:
        raise ValueError("initial region must be nonempty")
    if initial.dim != state_space.dim:
        raise DimensionError("initial region and state space disagree on dimension")
    b = _Builder(state_space)
    s, edges, targets = b.build(formula)
    if len(targets) == 1:
        t = targets[0]
    else:
        t = b.vertex(b.full, "done")
        for u in targets:
            b.eregion[(u, t)] = b.full
    b.vregion[s] = initial
    b.label[s] = "initial"

    order = sorted(b.vregion, key=lambda v: int(v[1:]))
    # renumber: source first, then creation order
    order.remove(s)
    order.insert(0, s)
    rename = {v: f"v{i}" for i, v in enumerate(order)}
    edges_sorted = sorted(b.eregion, key=lambda e: (order.index(e[0]), order.index(e[1])))
    eregion = {(rename[u], rename[v]): b.eregion[(u, v)] for u, v in edges_sorted}
    vregion = {rename[v]: b.vregion[v] for v in order}
    bad = frozenset(e for e, r in eregion.items() if r.is_empty)
    bad |= frozenset(e for e in eregion if vregion[e[1]].is_empty)
    if bad:
        warnings.warn(f"{len(bad)} unsatisfiable edge(s) in compiled graph", UnsatisfiableEdgeWarning,
                      stacklevel=2)
    return AbstractGraph(
        vertices=tuple(rename[v] for v in order),
        edges=tuple(eregion),
        vertex_regions=vregion,
        edge_regions=eregion,
        source=rename[s],
        target=rename[t],
        labels={rename[v]: b.label[v] for v in order},
        unsatisfiable=bad,
    )


# ---------------------------------------------------------------------------
# Queries
# ---------------------------------------------------------------------------

def topo_sort(G: AbstractGraph) -> list[str]:
    """Kahn's algorithm; among ready vertices the earliest-inserted goes first."""
    index = {v: i for i, v in enumerate(G.vertices)}
    indeg = {v: 0 for v in G.vertices}
    for _, v in G.edges:
        indeg[v] += 1
    ready = sorted((v for v in G.vertices if indeg[v] == 0), key=index.get)
    out = []
    succ = {v: [] for v in G.vertices}
    for u, v in G.edges:
        succ[u].append(v)
    while ready:
        v = ready.pop(0)
        out.append(v)
        for w in succ[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                ready.append(w)
                ready.sort(key=index.get)
    if len(out) != len(G.vertices):
        raise InvalidGraphError("graph has a cycle")
    return out


def check_abstract_reachability(G: AbstractGraph, prefix) -> bool:
    """Whether the finite trajectory traverses ``G`` from source to target.

    Needs indices ``0 = i_0 <= i_1 <= ... <= i_k`` and a path ``s = v_0 .. v_k = t``
    with ``x_{i_j}`` in the region of ``v_j`` and every state between ``i_j`` and
    ``i_{j+1}`` in the region of the edge ``(v_j, v_{j+1})``.
    """
    prefix = np.asarray(prefix, dtype=float)
    if prefix.ndim != 2 or prefix.shape[0] < 1:
        raise ValueError("prefix must be a nonempty (length, dim) array")
    if prefix.shape[1] != G.dim:
        raise DimensionError(f"states of dimension {prefix.shape[1]}, graph has {G.dim}")
    L = prefix.shape[0]
    inv = {v: G.vertex_regions[v].contains_many(prefix) for v in G.vertices}
    reach = {v: np.zeros(L, dtype=bool) for v in G.vertices}
    reach[G.source][0] = inv[G.source][0]
    out = {v: [] for v in G.vertices}
    for e in G.edges:
        out[e[0]].append(e)
    for u in topo_sort(G):
        ru = reach[u]
        if not ru.any():
            continue
        for e in out[u]:
            ine = G.edge_regions[e].contains_many(prefix)
            active = False
            inv_v = inv[e[1]]
            rv = reach[e[1]]
            for j in range(L):
                active = bool(ine[j] and (active or ru[j]))
                if active and inv_v[j]:
                    rv[j] = True
    return bool(reach[G.target].any())


def export_dot(G: AbstractGraph) -> str:
    lines = ["digraph abstract_graph {", "  rankdir=LR;"]
    for v in G.vertices:
        shape = "doublecircle" if v == G.target else ("box" if v == G.source else "ellipse")
        label = G.labels.get(v, v)
        text = f"{v}: {label}\\n{G.vertex_regions[v]}"
        lines.append(f'  "{v}" [shape={shape}, label="{_esc(text)}"];')
    for e in G.edges:
        style = ", style=dashed, color=gray" if e in G.unsatisfiable else ""
        lines.append(f'  "{e[0]}" -> "{e[1]}" [label="{_esc(str(G.edge_regions[e]))}"{style}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _esc(s: str) -> str:
    return s.replace('"', '\\"')


def summary_table(G: AbstractGraph) -> str:
    rows = ["kind\tid\tregion"]
    for v in G.vertices:
        tag = " (source)" if v == G.source else (" (target)" if v == G.target else "")
        rows.append(f"vertex\t{v}{tag}\t{G.vertex_regions[v]}")
    for e in G.edges:
        flag = " [unsatisfiable]" if e in G.unsatisfiable else ""
        rows.append(f"edge\t{G.edge_id(e)}{flag}\t{G.edge_regions[e]}")
    return "\n".join(rows) + "\n"
