"""Reach-avoid supermartingale arithmetic: additive/multiplicative conversion,
the probability bound, parameter extraction from verifier margins, and
certificate records."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .artifacts import atomic_write_text, sha256_file

FORMAT = "claps-certificate 1"
DELTA_CLAMP = 1e-9
_LOG_TINY = math.log(np.finfo(np.float64).tiny)


class DomainError(ValueError):
    pass


class CertificateInvalidError(ValueError):
    pass


def _require(cond: bool, msg: str):
    if not cond:
        raise DomainError(msg)


def add_to_mul(eps: float, lam: float) -> tuple[float, float]:
    """Multiplicative parameters (gamma, delta) of an (eps, lam)-additive certificate."""
    _require(eps > 0, "eps must be positive")
    _require(lam > 1, "lambda must exceed 1")
    _require(eps < lam, "eps must be below lambda so that gamma stays positive")
    return (lam - eps) / lam, min(eps, lam)


def mul_to_add(gamma: float, delta: float, lam: float) -> float:
    """Additive margin of a (gamma, delta, lam)-multiplicative certificate."""
    _require(0 < gamma < 1, "gamma must lie in (0, 1)")
    _require(delta > 0, "delta must be positive")
    _require(lam > 1, "lambda must exceed 1")
    return (1.0 - gamma) * delta


@dataclass(frozen=True)
class Bound:
    N: float
    bound: float
    saturated: bool = False
    prior: float = 0.0


def steps_floor(lam: float, L_V: float, delta_step: float) -> int:
    return int(math.floor((lam - 1.0) / (L_V * delta_step)))


def compute_bound(lam: float, gamma: float, L_V: float, delta_step: float,
                  caption_mode: bool = False) -> Bound:
    """Lower bound ``1 - gamma**N / lam`` on the reach-avoid probability.

    ``N = floor((lam - 1) / (L_V * delta_step))`` is the least number of steps in
    which the certificate can climb from 1 to ``lam``. ``caption_mode`` uses the
    exponent ``2 * lam`` instead, the simplified form quoted for the benchmark
    table. ``gamma**N`` is evaluated as ``exp(N log gamma)``; when it underflows
    the bound is pinned just below 1 and ``saturated`` is set.
    """
    _require(lam > 1, "lambda must exceed 1")
    _require(0 < gamma <= 1, "gamma must lie in (0, 1]")
    _require(L_V > 0, "L_V must be positive")
    _require(delta_step > 0, "the step bound must be positive")
    N = 2.0 * lam if caption_mode else steps_floor(lam, L_V, delta_step)
    prior = 1.0 - 1.0 / lam
    if gamma == 1.0 or N == 0:
        return Bound(N, prior, False, prior)
    e = N * math.log(gamma) - math.log(lam)
    if e < _LOG_TINY:
        return Bound(N, float(np.nextafter(1.0, 0.0)), True, prior)
    b = 1.0 - math.exp(e)
    if b >= 1.0:
        return Bound(N, float(np.nextafter(1.0, 0.0)), True, prior)
    return Bound(N, b, False, prior)


def extract_gamma_delta(min_margin: float, lam: float) -> tuple[float, float]:
    """(delta, gamma) from the smallest verified decrease margin.

    ``delta = min(margin, lam)`` and ``gamma = 1 - delta / lam``; a margin that
    reaches ``lam`` is pulled just below it so that gamma stays positive.
    """
    _require(lam > 1, "lambda must exceed 1")
    if not min_margin > 0:
        raise CertificateInvalidError(f"nonpositive decrease margin {min_margin!r}")
    delta = min(min_margin, lam)
    if delta >= lam:
        delta = lam * (1.0 - DELTA_CLAMP)
    return delta, 1.0 - delta / lam


def verifier_constant(L_V: float, L_f: float, L_pi: float) -> float:
    return L_V * (L_f * (L_pi + 1.0) + 1.0)


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Certificate:
    lam: float
    gamma: float
    delta: float
    eps: float
    tau: float
    K: float
    L_V: float
    L_f: float
    L_pi: float
    Delta: float
    N: int
    bound: float
    saturated: bool = False
    min_margin: float = 0.0
    trivial: bool = False
    local_lipschitz: bool = False     # decrease slack used per-vertex local constants
    system_hash: str = ""
    policy_hash: str = ""
    certificate_hash: str = ""

    def to_text(self) -> str:
        lines = [f"# {FORMAT}"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {v!r}" if not isinstance(v, str) else f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Certificate":
        lines = text.splitlines()
        if not lines or lines[0].strip() != f"# {FORMAT}":
            raise CertificateInvalidError("not a certificate file or unsupported version")
        raw = {}
        for ln in lines[1:]:
            if not ln.strip():
                continue
            k, _, v = ln.partition("=")
            raw[k.strip()] = v.strip()
        kw = {}
        for f in fields(cls):
            if f.name not in raw:
                raise CertificateInvalidError(f"missing field {f.name}")
            v = raw[f.name]
            if f.type in ("float", float):
                kw[f.name] = float(v)
            elif f.type in ("int", int):
                kw[f.name] = int(v)
            elif f.type in ("bool", bool):
                kw[f.name] = v == "True"
            else:
                kw[f.name] = v
        return cls(**kw)

    def save(self, path) -> None:
        atomic_write_text(Path(path), self.to_text())

    @classmethod
    def load(cls, path) -> "Certificate":
        return cls.from_text(Path(path).read_text())

    def as_dict(self) -> dict:
        return asdict(self)

    def with_hashes(self, **hashes) -> "Certificate":
        return replace(self, **hashes)


def make_certificate(lam: float, min_margin: float, tau: float, L_V: float, L_f: float,
                     L_pi: float, Delta: float, local_lipschitz: bool = False,
                     **hashes) -> Certificate:
    delta, gamma = extract_gamma_delta(min_margin, lam)
    b = compute_bound(lam, gamma, L_V, Delta)
    return Certificate(
        lam=float(lam), gamma=gamma, delta=delta, eps=(1.0 - gamma) * delta, tau=float(tau),
        K=verifier_constant(L_V, L_f, L_pi), L_V=float(L_V), L_f=float(L_f), L_pi=float(L_pi),
        Delta=float(Delta), N=int(b.N), bound=b.bound, saturated=b.saturated,
        min_margin=float(min_margin), local_lipschitz=local_lipschitz, **hashes)


def trivial_certificate(**hashes) -> Certificate:
    """Record for a task whose initial set already lies in the target."""
    return Certificate(lam=math.inf, gamma=1.0, delta=0.0, eps=0.0, tau=0.0, K=0.0, L_V=0.0,
                       L_f=0.0, L_pi=0.0, Delta=0.0, N=0, bound=1.0, trivial=True, **hashes)


@dataclass(frozen=True)
class CertificateCheck:
    violations: tuple[str, ...]

    def __bool__(self) -> bool:
        return not self.violations


def _close(a: float, b: float, rtol: float = 1e-12) -> bool:
    return abs(a - b) <= rtol * max(1.0, abs(a), abs(b))


def validate_certificate(cert: Certificate, system_file=None, policy_file=None,
                         certificate_file=None) -> CertificateCheck:
    """Recompute every invariant of ``cert`` and compare the referenced file hashes."""
    bad = []
    if cert.trivial:
        if cert.bound != 1.0:
            bad.append("trivial certificate must carry bound 1")
    else:
        if not cert.lam > 1:
            bad.append("lambda must exceed 1")
        if not 0 < cert.gamma < 1:
            bad.append("gamma must lie in (0, 1)")
        if not cert.delta > 0:
            bad.append("delta must be positive")
        if not (cert.L_V > 0 and cert.Delta > 0):
            bad.append("L_V and Delta must be positive")
        else:
            if cert.N != steps_floor(cert.lam, cert.L_V, cert.Delta):
                bad.append("N does not equal floor((lambda-1)/(L_V*Delta))")
            if cert.lam > 1 and 0 < cert.gamma <= 1:
                b = compute_bound(cert.lam, cert.gamma, cert.L_V, cert.Delta)
                if not _close(b.bound, cert.bound):
                    bad.append("bound does not equal 1 - gamma^N/lambda")
        if not _close(cert.K, verifier_constant(cert.L_V, cert.L_f, cert.L_pi)):
            bad.append("K does not equal L_V*(L_f*(L_pi+1)+1)")
        if cert.lam > 1 and not _close(cert.gamma, 1.0 - cert.delta / cert.lam):
            bad.append("gamma does not equal 1 - delta/lambda")
        if not _close(cert.eps, (1.0 - cert.gamma) * cert.delta):
            bad.append("eps does not equal (1-gamma)*delta")
        if not 0.0 <= cert.bound <= 1.0:
            bad.append("bound outside [0, 1]")
    for name, path in (("system", system_file), ("policy", policy_file),
                       ("certificate", certificate_file)):
        if path is None:
            continue
        want = getattr(cert, f"{name}_hash")
        try:
            got = sha256_file(path)
        except OSError as exc:
            bad.append(f"{name} file unreadable: {exc}")
            continue
        if got != want:
            bad.append(f"{name} hash mismatch")
    return CertificateCheck(tuple(bad))
