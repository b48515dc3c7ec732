import numpy as np
import pytest

from claps.absgraph import AbstractGraph, check_abstract_reachability, topo_sort
from claps.composition import (EdgeSolution, MissingSolutionError, NoPathError, SolutionStore,
                               compose, edge_task, extract_path, forward_pass, mc_composed,
                               persistent, run_claps, stub_edge_solver)
from claps.learnverify.grid import Discretization
from claps.learnverify.verifier import verify_candidate
from claps.ninerooms import table2_probabilities
from claps.nn import Mlp, forward
from claps.spectrl import Achieve, Atom, Box, Region
from claps.system import StochasticSystem, TriangularNoise
from conftest import affine_rasm, contraction_system, zero_policy

R = Region.of(Box((0.0,), (1.0,)))


def graph(edges, source="s", target="t"):
    names = tuple(dict.fromkeys(v for e in edges for v in e))
    return AbstractGraph(names, tuple(edges), {v: R for v in names}, {e: R for e in edges},
                         source, target)


def counting(solver):
    calls = []

    def solve(e):
        calls.append(e)
        return solver(e)

    return solve, calls


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def test_single_edge():
    G = graph([("s", "t")])
    fp = forward_pass(G, 0.5, stub_edge_solver(G, {("s", "t"): 0.7}))
    assert fp.prob["t"] == 0.7 and fp.prob["s"] == 1.0
    assert extract_path(G, fp.prob, fp.solutions) == ["s", "t"]


def test_diamond_picks_best_branch():
    edges = [("s", "a"), ("a", "t"), ("s", "b"), ("b", "t")]
    G = graph(edges)
    table = {("s", "a"): 0.9, ("a", "t"): 0.5, ("s", "b"): 0.6, ("b", "t"): 0.8}
    prob, sols = forward_pass(G, 0.0, stub_edge_solver(G, table))
    assert prob["t"] == pytest.approx(0.48, abs=1e-15)
    assert extract_path(G, prob, sols) == ["s", "b", "t"]


def test_nine_rooms_stub(nine):
    _, G = nine
    solve, calls = counting(stub_edge_solver(G, table2_probabilities()))
    fp = forward_pass(G, 0.3, solve)
    assert fp.prob["(2,2)"] == pytest.approx(0.723 * 0.615 * 0.745, abs=1e-12)
    assert extract_path(G, fp.prob, fp.solutions) == ["(0,0)", "(0,1)", "(2,1)", "(2,2)"]
    assert len(calls) == len(set(calls)) <= len(G.edges)


def test_filter_prunes_and_calls_once(nine):
    _, G = nine
    solve, calls = counting(stub_edge_solver(G, table2_probabilities()))
    fp = forward_pass(G, 0.5, solve)
    assert len(calls) == len(set(calls)) < len(G.edges)
    for v, w in fp.unsolved(G):
        assert fp.prob[v] < 0.5


def test_unsolvable_edge_is_zero():
    G = graph([("s", "t")])
    fp = forward_pass(G, 0.1, lambda e: None)
    assert fp.prob["t"] == 0.0 and fp.solutions[("s", "t")].probability == 0.0
    with pytest.raises(NoPathError):
        extract_path(G, fp.prob, fp.solutions)


def _oracle(names, edges, table, p, s, t):
    """Best path product where every proper prefix passes the threshold."""
    succ = {v: [w for u, w in edges if u == v] for v in names}
    best = 0.0

    def walk(v, prod):
        nonlocal best
        if v == t:
            best = max(best, prod)
            return
        if prod < p or prod <= 0:
            return
        for w in succ[v]:
            walk(w, table[(v, w)] * prod)

    walk(s, 1.0)
    return best


def test_probmap_matches_path_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(2, 11))
        names = [f"v{i}" for i in range(n)]
        order = rng.permutation(n)
        edges = [(names[order[i]], names[order[j]]) for i in range(n) for j in range(i + 1, n)
                 if rng.random() < 0.35]
        s, t = names[order[0]], names[order[-1]]
        edges = list(dict.fromkeys(edges + [(s, t)]))
        table = {e: float(rng.choice([0.0, *rng.uniform(0, 1, 4)])) for e in edges}
        G = AbstractGraph(tuple(names), tuple(edges), {v: R for v in names},
                          {e: R for e in edges}, s, t)
        p = float(rng.choice([0.0, 0.2, 0.5, 0.8]))
        fp = forward_pass(G, p, stub_edge_solver(G, table))
        assert fp.prob[t] == pytest.approx(_oracle(names, edges, table, p, s, t), abs=1e-12)
        if fp.prob[t] > 0:
            path = extract_path(G, fp.prob, fp.solutions)
            prod = 1.0
            for e in zip(path[:-1], path[1:]):
                prod *= table[e]
            assert prod == pytest.approx(fp.prob[t], abs=1e-12)


def test_tie_break_is_topological_and_stable():
    edges = [("s", "a"), ("a", "t"), ("s", "b"), ("b", "t")]
    G = graph(edges)
    table = {e: 0.5 for e in edges}
    order = topo_sort(G)
    first = min(("a", "b"), key=order.index)
    for _ in range(3):
        prob, sols = forward_pass(G, 0.0, stub_edge_solver(G, table))
        assert extract_path(G, prob, sols) == ["s", first, "t"]


def test_edge_task_construction(nine):
    settings, G = nine
    e = ("(0,0)", "(0,1)")
    task = edge_task(G, e, settings.system.state_space)
    assert task.initial == G.vertex_regions["(0,0)"] and task.target == G.vertex_regions["(0,1)"]
    x = np.array([[0.5, 0.5]])
    assert not task.unsafe.contains_many(x)[0]


# ---------------------------------------------------------------------------
# Switching controller
# ---------------------------------------------------------------------------

def mover(c):
    return Mlp([np.zeros((1, 1))], [np.array([float(c)])], "identity")


def line_graph(first_region=(0.0, 2.0)):
    vr = {"s": Region.of(Box((0.0,), (0.05,))), "m": Region.of(Box((1.65,), (1.75,))),
          "t": Region.of(Box((2.5,), (3.0,)))}
    er = {("s", "m"): Region.of(Box((first_region[0],), (first_region[1],))),
          ("m", "t"): Region.of(Box((0.0,), (3.0,)))}
    return AbstractGraph(("s", "m", "t"), (("s", "m"), ("m", "t")), vr, er, "s", "t")


def walker():
    return StochasticSystem(Box((0.0,), (3.0,)), Box((-1.0,), (1.0,)), TriangularNoise((0.0,)),
                            a=(1.0,), b=(0.1,), g=(0.0,))


def _sols(G):
    return {("s", "m"): EdgeSolution(("s", "m"), 0.9, policy=mover(1.0)),
            ("m", "t"): EdgeSolution(("m", "t"), 0.9, policy=mover(0.5))}


def _run(G, steps):
    S = walker()
    pol = compose(G, ["s", "m", "t"], _sols(G))
    pol.reset(1)
    x = np.zeros((1, 1))
    modes, us = [], []
    for _ in range(steps):
        u = pol.act(x)
        modes.append(pol.mode)
        us.append(float(u[0, 0]))
        x = S.step(x, u, np.zeros_like(x))
    return pol, modes, us


def test_switch_at_step_17():
    pol, modes, us = _run(line_graph(), 20)
    assert pol.switches[0] == (17, 0, 1)
    assert all(m == (0, False) for m in modes[:17]) and modes[17] == (1, False)
    assert us[16] == 1.0 and us[17] == 0.5


def test_freeze_after_leaving_edge_region():
    pol, modes, us = _run(line_graph((0.0, 1.2)), 30)
    fail = next(i for i, m in enumerate(modes) if m[1])
    assert fail == 13                                   # x = 1.3 is the first state outside
    assert all(m == (0, True) for m in modes[fail:])
    assert not pol.switches and all(u == 1.0 for u in us)


def test_single_edge_controller_is_edge_policy():
    G = graph([("s", "t")])
    pol = compose(G, ["s", "t"], {("s", "t"): EdgeSolution(("s", "t"), 0.5, policy=mover(0.3))})
    x = np.array([[0.2], [0.7]])
    assert np.allclose(pol.act(x), forward(mover(0.3), x))


def test_missing_solution():
    G = graph([("s", "t")])
    with pytest.raises(MissingSolutionError):
        compose(G, ["s", "t"], {("s", "t"): EdgeSolution(("s", "t"), 0.5)})


def test_composition_sound_on_certified_edge():
    S = contraction_system()
    vr = {"s": Region.of(Box((0.9,), (1.0,))), "t": Region.of(Box((0.0,), (0.1,)))}
    G = AbstractGraph(("s", "t"), (("s", "t"),), vr, {("s", "t"): R}, "s", "t")
    task = edge_task(G, ("s", "t"), S.state_space)
    res = verify_candidate(S, zero_policy(), affine_rasm(), 2.0, task,
                           Discretization.with_mesh(S.state_space, 0.005))
    cert = res.certificate
    sol = EdgeSolution(("s", "t"), cert.bound, cert, zero_policy(), affine_rasm())
    prob, sols = forward_pass(G, 0.3, lambda e: sol)
    pol = compose(G, extract_path(G, prob, sols), sols)
    mc, (xs, _) = mc_composed(S, pol, 50, 2000, seed=0)
    assert mc.upper >= prob["t"]
    for k in range(10):
        assert check_abstract_reachability(G, xs[:, k, :] if xs.ndim == 3 else xs[k])


# ---------------------------------------------------------------------------
# Store and driver
# ---------------------------------------------------------------------------

def test_store_rerun_does_no_training(tmp_path):
    G = graph([("s", "a"), ("a", "t")])
    base, calls = counting(stub_edge_solver(G, {("s", "a"): 0.8, ("a", "t"): 0.9},
                                            policy_factory=lambda e: mover(0.1)))
    store = SolutionStore(tmp_path, "abc")
    first = forward_pass(G, 0.5, persistent(base, store, G))
    n = len(calls)
    assert n == 2
    again = SolutionStore(tmp_path, "abc")
    second = forward_pass(G, 0.5, persistent(base, again, G))
    assert len(calls) == n and again.hits == 2 and again.misses == 0
    assert second.prob == first.prob
    assert second.solutions[("s", "a")].policy is not None


def test_run_claps_trivial_edge():
    S = contraction_system()
    A = Atom("A", Region.of(Box((0.0,), (0.1,))))
    r = run_claps(S, Achieve(A), 0.9, initial=A.region)
    assert r.success and r.bound == 1.0 and r.path == [r.graph.source, r.graph.target]
    assert all(c.trivial for c in r.certificates.values())


def test_run_claps_stub(nine):
    _, G = nine
    ok = run_claps(walker(), G, 0.3, edge_solver=stub_edge_solver(G, table2_probabilities()))
    assert ok.success and ok.bound == pytest.approx(0.331260525, abs=1e-9)
    assert ok.policy is None        # stub edges carry no policies
    bad = run_claps(walker(), G, 0.5, edge_solver=stub_edge_solver(G, table2_probabilities()))
    assert not bad.success and bad.path is None
    assert any(bad.prob[v] < 0.5 for v, _ in bad.forward.unsolved(G))


def test_run_claps_rejects_threshold():
    G = graph([("s", "t")])
    for p in (0.0, 1.0):
        with pytest.raises(ValueError):
            run_claps(walker(), G, p, edge_solver=stub_edge_solver(G, {}))


def test_edge_probability_validation():
    with pytest.raises(ValueError):
        EdgeSolution(("s", "t"), 1.5)
    S = contraction_system()
    vr = {"s": Region.of(Box((0.9,), (1.0,))), "t": Region.of(Box((0.0,), (0.1,)))}
    G = AbstractGraph(("s", "t"), (("s", "t"),), vr, {("s", "t"): R}, "s", "t")
    cert = verify_candidate(S, zero_policy(), affine_rasm(), 2.0, edge_task(G, ("s", "t"), S.state_space),
                            Discretization.with_mesh(S.state_space, 0.005)).certificate
    with pytest.raises(ValueError):
        EdgeSolution(("s", "t"), cert.bound / 2, cert)
