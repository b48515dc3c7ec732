import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from claps.learnverify.config import TrainConfig
from claps.learnverify.grid import Discretization, GridTooLargeError
from claps.learnverify.learner import compute_losses
from claps.learnverify.verifier import (Certified, Counterexamples, CounterexampleSets,
                                       expected_value_upper, verify_candidate)
from claps.nn import Mlp, forward, init_mlp
from claps.rasm import validate_certificate
from claps.spectrl import Box, Region
from claps.system import DiscreteNoise, StochasticSystem, TriangularNoise
from conftest import (BUMP_HI, BUMP_LO, affine_rasm, contraction_system, contraction_task,
                      perturbed_rasm, zero_policy)

MESH = 0.005


def _verify(V, lam=2.0, task=None, mode="local"):
    S = contraction_system()
    disc = Discretization.with_mesh(S.state_space, MESH)
    return verify_candidate(S, zero_policy(), V, lam, task or contraction_task(), disc,
                            TrainConfig(lipschitz_mode=mode))


@pytest.mark.parametrize("mode", ["local", "global"])
def test_contraction_certified(mode):
    r = _verify(affine_rasm(), mode=mode)
    assert isinstance(r, Certified)
    assert r.min_margin > 0
    c = r.certificate
    assert c.local_lipschitz == (mode == "local")
    assert 0.5 < c.bound < 1 and validate_certificate(c)


def test_perturbed_gives_counterexample_in_bump_preimage():
    r = _verify(perturbed_rasm())
    assert isinstance(r, Counterexamples)
    assert len(r.sets.init) == 0 and len(r.sets.unsafe) == 0
    dec = r.sets.dec[:, 0]
    assert len(dec) >= 1
    # successors 0.5 x land on the bump exactly when x is in [0.6, 0.7]
    assert np.all((dec >= 2 * BUMP_LO - MESH) & (dec <= 2 * BUMP_HI + MESH))
    assert np.all(r.dec_violation > 0)
    assert np.all(np.diff(r.dec_violation) <= 0)   # sorted by violation


def test_counterexamples_violate_their_terms():
    V = perturbed_rasm()
    r = _verify(V)
    S = contraction_system()
    cfg = TrainConfig(mesh=MESH, noise_samples=1)
    assert len(r.sets.dec) and np.all(r.dec_violation > 0)
    for x in r.sets.dec:
        none = np.zeros((0, 1))
        sets = CounterexampleSets(none, none, x[None])
        # noise-free contraction, so one noise sample gives the exact expectation
        loss = compute_losses(V, zero_policy(), sets, 2.0, cfg, S, np.random.default_rng(0))
        assert loss.decrease > 0


def test_constant_below_lambda_fails_unsafe_check():
    V = Mlp([np.zeros((1, 1))], [np.array([math.log(2.0)])], "identity")
    task = contraction_task(Region.of(Box((0.5,), (0.6,))))
    r = _verify(V, lam=2.0, task=task)
    assert isinstance(r, Counterexamples)
    assert len(r.sets.unsafe) >= 1
    assert np.all((r.sets.unsafe >= 0.5 - MESH) & (r.sets.unsafe <= 0.6 + MESH))
    assert np.all(r.unsafe_violation == pytest.approx(2.0 - math.log(2.0)))


def test_initial_violation_reported():
    W1 = np.array([[1.0], [-1.0]])
    V = Mlp([W1, np.array([[2.0, 2.0]])], [np.zeros(2), np.array([0.1])], "identity")
    r = _verify(V)
    assert isinstance(r, Counterexamples) and len(r.sets.init) >= 1
    assert np.all(r.init_violation > 0)


def test_negative_certificate_flagged():
    V = Mlp([np.zeros((1, 1))], [np.array([-0.5])], "identity")
    r = _verify(V)
    assert isinstance(r, Counterexamples) and any("negative" in n for n in r.notes)


def test_verification_is_deterministic():
    a = _verify(affine_rasm()).certificate
    b = _verify(affine_rasm()).certificate
    assert a.to_text() == b.to_text()


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        _verify(affine_rasm(), lam=1.0)
    V = affine_rasm()
    V.weights[0][0, 0] = np.nan
    with pytest.raises(ValueError):
        _verify(V)


# ---------------------------------------------------------------------------
# Expectation bound
# ---------------------------------------------------------------------------

def _noisy_line(noise):
    return StochasticSystem(Box((-4.0,), (4.0,)), Box((-1.0,), (1.0,)), noise, a=(0.8,), b=(0.5,),
                            g=(1.0,))


def _net(seed, head="softplus", d=1):
    rng = np.random.default_rng(seed)
    net = init_mlp([d, 8, 1], head, rng)
    for b in net.biases:
        b[:] = rng.normal(0, 0.5, b.shape)
    return net


def _policy(seed, d=1):
    return init_mlp([d, 4, d], "tanh", np.random.default_rng(seed + 100), -np.ones(d), np.ones(d))


def test_deterministic_expectation_is_exact():
    S = _noisy_line(TriangularNoise((0.0,)))
    V, pi = _net(1), _policy(1)
    x = np.linspace(-3, 3, 25)[:, None]
    nxt = S.step(x, forward(pi, x), np.zeros_like(x))
    assert np.allclose(expected_value_upper(V, S, pi, x, 8), forward(V, nxt)[:, 0], atol=1e-9)


@given(st.integers(0, 10_000))
def test_refinement_tightens(seed):
    S = _noisy_line(TriangularNoise((0.5,)))
    V, pi = _net(seed), _policy(seed)
    x = np.random.default_rng(seed).uniform(-3, 3, (20, 1))
    coarse = expected_value_upper(V, S, pi, x, 1)
    fine = expected_value_upper(V, S, pi, x, 16)
    assert np.all(coarse >= fine - 1e-12)


def test_two_outcome_expectation_is_tight():
    q = 0.3
    S = _noisy_line(DiscreteNoise(((0.4,), (-0.2,)), (q, 1 - q)))
    V, pi = _net(3), _policy(3)
    x = np.linspace(-3, 3, 31)[:, None]
    u = forward(pi, x)
    exact = q * forward(V, S.step(x, u, np.full_like(x, 0.4)))[:, 0] \
        + (1 - q) * forward(V, S.step(x, u, np.full_like(x, -0.2)))[:, 0]
    up = expected_value_upper(V, S, pi, x, 64)
    assert np.all(up >= exact) and np.allclose(up, exact, atol=1e-6)


def test_expectation_upper_over_approximates_sampling():
    S = _noisy_line(TriangularNoise((0.5,)))
    rng = np.random.default_rng(11)
    n = 1_000_000
    for probe in range(5):
        V, pi = _net(20 + probe, head="identity"), _policy(20 + probe)
        x = rng.uniform(-3, 3, (1, 1))
        w = S.noise.sample(rng, n)
        xs = np.repeat(x, n, axis=0)
        vals = forward(V, S.step(xs, forward(pi, xs), w))[:, 0]
        mean, se = vals.mean(), vals.std(ddof=1) / math.sqrt(n)
        assert expected_value_upper(V, S, pi, x, 8)[0] >= mean - 4 * se


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------

@given(st.floats(0.01, 0.5), st.integers(0, 10_000))
def test_grid_covers_space(tau, seed):
    space = Box((0.0, -1.0), (3.0, 2.0))
    disc = Discretization.with_mesh(space, tau)
    x = np.random.default_rng(seed).uniform(space.lo, space.hi, (500, 2))
    d = np.abs(disc.nearest_vertex(x) - x).sum(axis=1)
    assert np.all(d <= tau + 1e-12)
    assert disc.covering_radius() <= tau + 1e-12


def test_grid_too_large():
    with pytest.raises(GridTooLargeError, match="larger mesh"):
        Discretization.with_mesh(Box((0.0, 0.0), (3.0, 3.0)), 1e-5)
    with pytest.raises(ValueError):
        Discretization.with_mesh(Box((0.0,), (1.0,)), 0.0)
