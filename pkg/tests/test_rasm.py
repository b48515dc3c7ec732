import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from claps.rasm import (DELTA_CLAMP, Certificate, CertificateInvalidError, DomainError, add_to_mul,
                        compute_bound, extract_gamma_delta, make_certificate, mul_to_add,
                        steps_floor, trivial_certificate, validate_certificate, verifier_constant)
from claps.spectrl import Box
from claps.system import DiscreteNoise, StochasticSystem

# ---------------------------------------------------------------------------
# Conversions
# ---------------------------------------------------------------------------


def test_add_to_mul_example():
    g, d = add_to_mul(0.5, 10.0)
    assert g == pytest.approx(0.95, abs=1e-15) and d == 0.5


def test_add_to_mul_limit():
    lam = 10.0
    eps = np.nextafter(lam, 0.0)
    g, d = add_to_mul(eps, lam)
    assert 0 < g < 1e-14 and d == eps


def test_add_to_mul_domain():
    for eps, lam in ((0.0, 10.0), (-1.0, 10.0), (0.5, 1.0), (10.0, 10.0), (11.0, 10.0)):
        with pytest.raises(DomainError):
            add_to_mul(eps, lam)


def test_mul_to_add_examples():
    assert mul_to_add(0.9, 1.0, 10.0) == pytest.approx(0.1, abs=1e-15)
    assert mul_to_add(0.5, 2.0, 10.0) == 1.0
    assert mul_to_add(np.nextafter(1.0, 0.0), 1.0, 10.0) < 1e-15


def test_mul_to_add_domain():
    for args in ((1.0, 1.0, 10.0), (0.0, 1.0, 10.0), (0.5, 0.0, 10.0), (0.5, 1.0, 0.5)):
        with pytest.raises(DomainError):
            mul_to_add(*args)


@given(st.floats(1.0001, 1e4), st.floats(1e-6, 0.9999))
def test_round_trip_margin_does_not_grow(lam, frac):
    eps = frac * lam
    assume(eps > 0)
    g, d = add_to_mul(eps, lam)
    assume(0 < g < 1)
    back = mul_to_add(g, d, lam)
    # (1 - (lam - eps)/lam) * eps = eps^2 / lam
    assert back == pytest.approx(eps * eps / lam, rel=1e-9)
    assert 0 < back <= eps * (1 + 1e-12)


# ---------------------------------------------------------------------------
# Definition-level check on two-outcome one-step systems
# ---------------------------------------------------------------------------

def _line(lam: float, noise: DiscreteNoise) -> StochasticSystem:
    return StochasticSystem(Box((0.0,), (3.0 * lam,)), Box((-1.0,), (1.0,)), noise,
                            a=(1.0,), b=(0.0,), g=(1.0,))


def _expected_next(system: StochasticSystem, x: float) -> float:
    """E[V(f(x, 0, w))] for V(x) = x, summed exactly over the noise outcomes."""
    xs = np.full((len(system.noise.probs), 1), x)
    w = np.array(system.noise.values)
    nxt = system.step(xs, np.zeros_like(xs), w)[:, 0]
    return float(np.dot(system.noise.probs, nxt))


def _two_outcome(mean: float, spread: float, q: float) -> DiscreteNoise:
    """Noise with outcomes ``mean + spread*(1-q)`` (prob q) and ``mean - spread*q``."""
    return DiscreteNoise(((mean + spread * (1 - q),), (mean - spread * q,)), (q, 1 - q))


def test_additive_implies_multiplicative_1000_tuples():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        lam = float(np.exp(rng.uniform(np.log(1.01), np.log(1e3))))
        eps = float(rng.uniform(1e-3, 0.999) * lam)
        gamma, delta = add_to_mul(eps, lam)
        x = float(rng.uniform(eps, lam))                  # V(x) = x <= lam and x >= eps
        slack = float(rng.uniform(0, x - eps))
        q = float(rng.uniform(0.05, 0.95))
        spread = float(rng.uniform(0, (x - eps - slack) / q)) if x - eps - slack > 0 else 0.0
        S = _line(lam, _two_outcome(-(eps + slack), spread, q))
        ev = _expected_next(S, x)
        assert x >= ev + eps - 1e-9 * lam                  # the additive premise holds
        assert gamma * x >= ev - 1e-9 * lam                # multiplicative decrease
        assert x >= delta * (1 - 1e-12)                    # strict positivity
        assert 0 < gamma < 1 and delta == min(eps, lam)


def test_multiplicative_implies_additive_1000_tuples():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        lam = float(np.exp(rng.uniform(np.log(1.01), np.log(1e3))))
        gamma = float(rng.uniform(1e-3, 0.999))
        delta = float(rng.uniform(1e-3, 1.0) * lam)
        eps = mul_to_add(gamma, delta, lam)
        x = float(rng.uniform(delta, lam))
        target = float(rng.uniform(0, gamma * x))         # E[V(next)] <= gamma V(x)
        q = float(rng.uniform(0.05, 0.95))
        spread = float(rng.uniform(0, target / q))
        S = _line(lam, _two_outcome(target - x, spread, q))
        ev = _expected_next(S, x)
        assert gamma * x >= ev - 1e-9 * lam
        assert x >= ev + eps - 1e-9 * lam
        assert eps == pytest.approx((1 - gamma) * delta, rel=1e-15)


def test_two_outcome_expectation_closed_form():
    S = _line(10.0, DiscreteNoise(((1.0,), (-2.0,)), (0.25, 0.75)))
    assert _expected_next(S, 5.0) == pytest.approx(0.25 * 6.0 + 0.75 * 3.0, abs=1e-15)


# ---------------------------------------------------------------------------
# Bound
# ---------------------------------------------------------------------------

def test_bound_prior_when_gamma_one():
    b = compute_bound(10.0, 1.0, 5.0, 0.1)
    assert b.bound == pytest.approx(0.9, abs=1e-15) and b.prior == b.bound


def test_bound_theorem_example():
    b = compute_bound(10.0, 0.99, 5.0, 0.1)
    assert b.N == 18
    assert b.bound == pytest.approx(1 - 0.99 ** 18 / 10, abs=1e-15)
    assert b.bound == pytest.approx(0.9165486239, abs=1e-10)


def test_bound_caption_form():
    got = [compute_bound(lam, 0.99, 5.0, 0.1, caption_mode=True) for lam in (10.0, 100.0, 1000.0)]
    assert got[0].bound == pytest.approx(0.91821, abs=5e-5)
    assert got[1].bound == pytest.approx(0.99866, abs=5e-5)
    assert got[2].bound >= 0.99999
    for b, lam in zip(got, (10.0, 100.0, 1000.0)):
        assert b.prior == pytest.approx(1 - 1 / lam, abs=1e-15)


def test_bound_underflow_saturates():
    b = compute_bound(1000.0, 1e-300, 1e-3, 1e-3)
    assert b.saturated and b.bound == np.nextafter(1.0, 0.0)
    assert not compute_bound(10.0, 0.99, 5.0, 0.1).saturated


def test_bound_zero_steps_is_prior():
    b = compute_bound(2.0, 0.5, 100.0, 1.0)
    assert b.N == 0 and b.bound == 0.5


def test_bound_domain():
    for args in ((1.0, 0.9, 1, 1), (10.0, 0.0, 1, 1), (10.0, 1.1, 1, 1), (10.0, 0.9, 0, 1),
                 (10.0, 0.9, 1, 0)):
        with pytest.raises(DomainError):
            compute_bound(*args)


lams = st.floats(1.01, 1e4)
gammas = st.floats(1e-6, 1 - 1e-9)
pos = st.floats(1e-3, 10.0)


@given(lams, gammas, pos, pos)
def test_bound_dominates_prior(lam, gamma, L_V, step):
    b = compute_bound(lam, gamma, L_V, step)
    assume(b.N >= 1)
    assert b.bound > 1 - 1 / lam


@given(lams, st.floats(1.0, 10.0), gammas, pos, pos)
def test_bound_monotone_in_lambda(lam, scale, gamma, L_V, step):
    lo = compute_bound(lam, gamma, L_V, step).bound
    hi = compute_bound(lam * scale, gamma, L_V, step).bound
    assert hi >= lo - 1e-15


@given(lams, gammas, gammas, pos, pos)
def test_bound_nonincreasing_in_gamma(lam, g1, g2, L_V, step):
    g1, g2 = sorted((g1, g2))
    assert compute_bound(lam, g1, L_V, step).bound >= compute_bound(lam, g2, L_V, step).bound - 1e-15


def test_steps_floor():
    assert steps_floor(10.0, 5.0, 0.1) == 18
    assert steps_floor(100.0, 5.0, 0.1) == 198


# ---------------------------------------------------------------------------
# Parameter extraction
# ---------------------------------------------------------------------------

def test_extract_example():
    d, g = extract_gamma_delta(0.2, 10.0)
    assert d == 0.2 and g == pytest.approx(0.98, abs=1e-15)


def test_extract_clamps_large_margin():
    d, g = extract_gamma_delta(50.0, 10.0)
    assert d == pytest.approx(10.0 * (1 - DELTA_CLAMP), rel=1e-15)
    assert 0 < g < 1


def test_extract_small_margin_approaches_prior():
    lam = 10.0
    d, g = extract_gamma_delta(1e-12, lam)
    assert g < 1
    b = compute_bound(lam, g, 5.0, 0.1)
    assert b.bound == pytest.approx(1 - 1 / lam, abs=1e-11)


@pytest.mark.parametrize("m", [0.0, -1.0, float("nan")])
def test_extract_rejects_nonpositive(m):
    with pytest.raises(CertificateInvalidError):
        extract_gamma_delta(m, 10.0)


# ---------------------------------------------------------------------------
# Certificate records
# ---------------------------------------------------------------------------

def _files(tmp_path):
    paths = {}
    for name in ("system", "policy", "certificate"):
        p = tmp_path / f"{name}.bin"
        p.write_bytes(name.encode() * 3)
        paths[name] = p
    return paths


def _fresh(tmp_path):
    import hashlib
    paths = _files(tmp_path)
    hashes = {f"{k}_hash": hashlib.sha256(p.read_bytes()).hexdigest() for k, p in paths.items()}
    cert = make_certificate(10.0, 0.2, 0.01, 5.0, 1.0, 2.0, 0.1, **hashes)
    return cert, paths


def _check(cert, paths):
    return validate_certificate(cert, paths["system"], paths["policy"], paths["certificate"])


def test_fresh_certificate_is_valid(tmp_path):
    cert, paths = _fresh(tmp_path)
    assert cert.N == 18 and cert.delta == 0.2
    assert cert.K == verifier_constant(5.0, 1.0, 2.0) == 5.0 * (1.0 * 3.0 + 1.0)
    assert cert.bound == pytest.approx(1 - 0.98 ** 18 / 10)
    assert _check(cert, paths)


def test_tampered_bound_flagged(tmp_path):
    from dataclasses import replace
    cert, paths = _fresh(tmp_path)
    check = _check(replace(cert, bound=0.99), paths)
    assert not check
    assert any("bound" in v for v in check.violations)


def test_stale_policy_hash(tmp_path):
    cert, paths = _fresh(tmp_path)
    paths["policy"].write_bytes(b"retrained")
    check = _check(cert, paths)
    assert not check and "policy hash mismatch" in check.violations


def test_every_invariant_named(tmp_path):
    from dataclasses import replace
    cert, _ = _fresh(tmp_path)
    bad = replace(cert, N=cert.N + 1, K=cert.K + 1, eps=cert.eps * 2, gamma=0.5)
    v = validate_certificate(bad).violations
    assert any(s.startswith("N ") for s in v)
    assert any(s.startswith("K ") for s in v)
    assert any(s.startswith("eps ") for s in v)
    assert any(s.startswith("gamma does not equal") for s in v)


def test_text_round_trip(tmp_path):
    cert, _ = _fresh(tmp_path)
    cert.save(tmp_path / "c.txt")
    back = Certificate.load(tmp_path / "c.txt")
    assert back == cert
    assert Certificate.from_text(trivial_certificate().to_text()).lam == math.inf
    with pytest.raises(CertificateInvalidError):
        Certificate.from_text("not a certificate")


def test_trivial_certificate_valid():
    assert validate_certificate(trivial_certificate())
