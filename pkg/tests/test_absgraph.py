import itertools
import json
import warnings

import numpy as np
import pytest

from claps.absgraph import (AbstractGraph, InvalidGraphError, UnsatisfiableEdgeWarning,
                            check_abstract_reachability, compile_to_graph, export_dot,
                            summary_table, topo_sort)
from claps.ninerooms import table2_probabilities
from claps.spectrl import Achieve, Atom, Box, Ensuring, Or, PredAnd, Region, Seq, eval_prefix
from test_spectrl import REGIONS, random_formula

SPACE = Box((0.0, 0.0), (4.0, 4.0))
FULL = Region.of(SPACE)


def cell(i, j):
    return Region.of(Box((float(i), float(j)), (i + 1.0, j + 1.0)))


A, B = Atom("A", cell(1, 0)), Atom("B", cell(2, 0))


def test_achieve_gives_two_vertices():
    G = compile_to_graph(Achieve(A), cell(0, 0), SPACE)
    assert len(G.vertices) == 2 and len(G.edges) == 1
    (e,) = G.edges
    assert G.edge_regions[e] == FULL
    assert G.vertex_regions[G.source] == cell(0, 0)
    assert G.vertex_regions[G.target] == A.region


def test_seq_gives_path_with_merged_region():
    G = compile_to_graph(Seq(Achieve(A), Achieve(B)), cell(0, 0), SPACE)
    assert len(G.vertices) == 3
    s, m, t = topo_sort(G)
    assert set(G.edges) == {(s, m), (m, t)}
    assert G.vertex_regions[m] == A.region and G.vertex_regions[t] == B.region


def test_or_has_fresh_source_into_each_branch():
    G = compile_to_graph(Or(Achieve(A), Achieve(B)), cell(0, 0), SPACE)
    out = G.successors(G.source)
    assert len(out) == 2
    regions = {G.vertex_regions[v] for v in out}
    assert regions == {A.region, B.region}
    assert not G.predecessors(G.source)


def test_ensuring_intersects_edge_regions():
    safe = Atom("S", Region.of(Box((0.0, 0.0), (4.0, 1.0))))
    G = compile_to_graph(Ensuring(Seq(Achieve(A), Achieve(B)), safe), cell(0, 0), SPACE)
    for e in G.edges:
        assert G.edge_regions[e] == safe.region


def test_unsatisfiable_edge_flagged():
    with pytest.warns(UnsatisfiableEdgeWarning):
        G = compile_to_graph(Ensuring(Achieve(A), PredAnd(A, Atom("C", cell(3, 3)))), cell(0, 0), SPACE)
    assert G.unsatisfiable == frozenset(G.edges)


def test_topo_single_and_diamond():
    r = cell(0, 0)
    G = AbstractGraph(("s", "t"), (("s", "t"),), {"s": r, "t": r}, {("s", "t"): r}, "s", "t")
    assert topo_sort(G) == ["s", "t"]
    edges = (("s", "a"), ("s", "b"), ("a", "t"), ("b", "t"))
    G = AbstractGraph(("s", "a", "b", "t"), edges, {v: r for v in "sabt"}, {e: r for e in edges},
                      "s", "t")
    order = topo_sort(G)
    assert order[0] == "s" and order[-1] == "t"


def test_cycle_rejected():
    r = cell(0, 0)
    edges = (("s", "a"), ("a", "b"), ("b", "a"), ("b", "t"))
    G = AbstractGraph(("s", "a", "b", "t"), edges, {v: r for v in "sabt"}, {e: r for e in edges},
                      "s", "t")
    with pytest.raises(InvalidGraphError):
        topo_sort(G)


def random_dag(rng, n):
    names = [f"u{i}" for i in range(n)]
    perm = rng.permutation(n)
    edges = [(names[perm[i]], names[perm[j]]) for i in range(n) for j in range(i + 1, n)
             if rng.random() < 0.4]
    return names, edges, names[perm[0]], names[perm[-1]]


def test_topo_random_dags():
    rng = np.random.default_rng(0)
    r = cell(0, 0)
    for _ in range(100):
        names, edges, s, t = random_dag(rng, int(rng.integers(2, 9)))
        edges = list(dict.fromkeys(edges + [(s, t)]))
        G = AbstractGraph(tuple(names), tuple(edges), {v: r for v in names},
                          {e: r for e in edges}, s, t)
        pos = {v: i for i, v in enumerate(topo_sort(G))}
        assert all(pos[u] < pos[v] for u, v in G.edges)


def brute_reach(G, xs):
    """Enumerate index sequences and paths directly."""
    L = len(xs)
    inside = lambda reg, i: reg.contains(xs[i])

    def extend(v, i):
        if v == G.target:
            return True
        for w in G.successors(v):
            er = G.edge_regions[(v, w)]
            for j in range(i, L):
                if not all(inside(er, k) for k in range(i, j + 1)):
                    break
                if inside(G.vertex_regions[w], j) and extend(w, j):
                    return True
        return False

    return inside(G.vertex_regions[G.source], 0) and extend(G.source, 0)


def test_reachability_matches_brute_force_on_random_graphs():
    rng = np.random.default_rng(5)
    cells = [cell(i, j) for i in range(2) for j in range(2)]
    unions = cells + [cells[0].union(cells[1]), cells[2].union(cells[3]), FULL]
    for _ in range(200):
        names = ("p", "q", "r")
        edges = [("p", "q"), ("q", "r")] + ([("p", "r")] if rng.random() < 0.5 else [])
        vr = {v: unions[rng.integers(len(unions))] for v in names}
        er = {e: unions[rng.integers(len(unions))] for e in edges}
        G = AbstractGraph(names, tuple(edges), vr, er, "p", "r")
        xs = rng.integers(0, 2, size=(int(rng.integers(1, 6)), 2)) + 0.5
        assert check_abstract_reachability(G, xs) == brute_reach(G, xs)


def test_exit_edge_region_before_goal():
    safe = Atom("S", Region.of(Box((0.0, 0.0), (4.0, 1.0))))
    G = compile_to_graph(Ensuring(Achieve(A), safe), cell(0, 0), SPACE)
    good = np.array([[0.5, 0.5], [0.7, 0.5], [0.9, 0.5], [1.5, 0.5]])
    bad = np.array([[0.5, 0.5], [0.7, 1.5], [0.9, 0.5], [1.5, 0.5]])
    assert check_abstract_reachability(G, good)
    assert not check_abstract_reachability(G, bad)


def test_spec_graph_equivalence_small_family():
    rng = np.random.default_rng(1)
    atoms = [Atom(n, cell(i, j)) for n, (i, j) in zip("WXYZ", itertools.product(range(2), range(2)))]
    band = Atom("band", Region.of(Box((0.0, 0.0), (4.0, 1.0))))
    for _ in range(100):
        f = Seq(Achieve(atoms[rng.integers(4)]), Ensuring(Achieve(atoms[rng.integers(4)]), band))
        G = compile_to_graph(f, FULL, SPACE)
        xs = rng.integers(0, 2, size=(int(rng.integers(1, 8)), 2)) + 0.5
        assert eval_prefix(f, xs) == check_abstract_reachability(G, xs)


def test_vertex_count_linear_in_size():
    rng = np.random.default_rng(2)
    for _ in range(200):
        f = random_formula(rng, 4)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UnsatisfiableEdgeWarning)
            G = compile_to_graph(f, REGIONS["a"], SPACE)
        assert len(G.vertices) <= 2 * f.size() + 1
        topo_sort(G)


def test_dot_output(nine):
    G2 = compile_to_graph(Achieve(A), cell(0, 0), SPACE)
    dot = export_dot(G2)
    assert dot.count("->") == 1 and dot.startswith("digraph")
    assert export_dot(G2) == dot
    _, G = nine
    dot9 = export_dot(G)
    assert dot9.count("->") == 9
    assert set(G.edges) == set(table2_probabilities())
    assert len(G.vertices) == 9
    assert "edge\t(0,0)->(0,1)" in summary_table(G)


def test_json_round_trip(nine):
    _, G = nine
    H = AbstractGraph.from_json(json.loads(json.dumps(G.to_json())))
    assert H.digest() == G.digest()
    assert H.edges == G.edges
