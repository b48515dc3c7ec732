"""Grid verifier for reach-avoid certificates.

Checks, for a policy ``pi`` and certificate network ``V``:

* initial cells: interval upper bound of ``V`` is at most 1,
* unsafe cells: interval lower bound of ``V`` is at least ``lam``,
* decrease: at every grid vertex next to a non-target cell where ``V`` may be
  at most ``lam``, a sound upper bound of the one-step expectation stays below
  ``V(x) - tau * K``.

Cells and vertices are swept hierarchically: a whole block is discharged with
one interval evaluation when possible and split otherwise.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from ..nn import Mlp, ibp_forward, lipschitz_bound, local_lipschitz, net_bytes
from ..rasm import Certificate, make_certificate, trivial_certificate
from ..system import ReachAvoidTask, StochasticSystem
from .config import TrainConfig
from .grid import (
    Discretization,
    cell_blocks_touching,
    cell_box,
    split_blocks,
    vertex_neighbourhood,
)

CHUNK = 2048


@dataclass
class CounterexampleSets:
    init: np.ndarray
    unsafe: np.ndarray
    dec: np.ndarray

    @classmethod
    def empty(cls, d: int) -> "CounterexampleSets":
        z = np.zeros((0, d))
        return cls(z, z.copy(), z.copy())

    def extend(self, other: "CounterexampleSets", cap: int | None = None) -> "CounterexampleSets":
        def cat(a, b):
            b = b if cap is None else b[:cap]
            return np.concatenate([a, b]) if len(b) else a

        return CounterexampleSets(cat(self.init, other.init), cat(self.unsafe, other.unsafe),
                                  cat(self.dec, other.dec))

    def sizes(self) -> tuple[int, int, int]:
        return len(self.init), len(self.unsafe), len(self.dec)

    @property
    def total(self) -> int:
        return sum(self.sizes())


@dataclass
class Certified:
    certificate: Certificate
    checked_vertices: int
    min_margin: float

    ok = True


@dataclass
class Counterexamples:
    sets: CounterexampleSets
    init_violation: np.ndarray
    unsafe_violation: np.ndarray
    dec_violation: np.ndarray
    checked_vertices: int = 0
    min_margin: float = float("nan")
    notes: list[str] = field(default_factory=list)

    ok = False


def policy_lipschitz(policy) -> float:
    if isinstance(policy, Mlp):
        return lipschitz_bound(policy)
    L = getattr(policy, "lipschitz", None)
    if L is None:
        raise TypeError("policy must be an Mlp or expose a 'lipschitz' attribute")
    return float(L)


def policy_interval(policy, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigorous enclosure of ``pi(x)`` at points ``x``."""
    if isinstance(policy, Mlp):
        return ibp_forward(policy, x, x)
    u = np.asarray(policy(x), dtype=float).reshape(x.shape[0], -1)
    return np.nextafter(u, -np.inf), np.nextafter(u, np.inf)


def system_hash(system: StochasticSystem) -> str:
    blob = json.dumps(system.describe(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _next_state_boxes(system: StochasticSystem, x, ulo, uhi, wlo, whi):
    a, b, g = (np.asarray(v) for v in (system.a, system.b, system.g))
    ux_lo = np.clip(ulo, system.action_space.lo, system.action_space.hi)
    ux_hi = np.clip(uhi, system.action_space.lo, system.action_space.hi)
    bu1, bu2 = b * ux_lo, b * ux_hi
    base_lo = a * x + np.minimum(bu1, bu2)
    base_hi = a * x + np.maximum(bu1, bu2)
    e1, e2 = g * wlo, g * whi
    lo = base_lo[:, None, :] + np.minimum(e1, e2)[None]
    hi = base_hi[:, None, :] + np.maximum(e1, e2)[None]
    lo, hi = np.nextafter(lo, -np.inf), np.nextafter(hi, np.inf)
    s = system.state_space
    return np.clip(lo, s.lo, s.hi), np.clip(hi, s.lo, s.hi)


def expected_value_upper(V: Mlp, system: StochasticSystem, policy, x, M: int) -> np.ndarray:
    """Certified upper bound on ``E_w[V(f(x, pi(x), w))]`` at each state of ``x``.

    The noise support is split into ``M`` cells per dimension; on each cell the
    next state ranges over a box whose image under ``V`` is bounded by interval
    propagation, and the cell bounds are weighted by their exact probabilities.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    wlo, whi, wts = system.noise.partition(M)
    m = len(wts)
    out = np.empty(x.shape[0])
    step = max(1, CHUNK * 8 // max(1, m))
    for s in range(0, x.shape[0], step):
        xc = x[s:s + step]
        ulo, uhi = policy_interval(policy, xc)
        lo, hi = _next_state_boxes(system, xc, ulo, uhi, wlo, whi)
        d = x.shape[1]
        _, vhi = ibp_forward(V, lo.reshape(-1, d), hi.reshape(-1, d))
        e = vhi.reshape(len(xc), m) @ wts
        out[s:s + step] = np.nextafter(e + 1e-15 * np.abs(e), np.inf)
    return out


def _ibp_scalar(V, lo, hi):
    out_lo = np.empty(len(lo))
    out_hi = np.empty(len(lo))
    for s in range(0, len(lo), CHUNK * 8):
        a, b = ibp_forward(V, lo[s:s + CHUNK * 8], hi[s:s + CHUNK * 8])
        out_lo[s:s + CHUNK * 8] = a[:, 0]
        out_hi[s:s + CHUNK * 8] = b[:, 0]
    return out_lo, out_hi


def _sweep_cells(V, disc, boxes_lo, boxes_hi, passes, limit_blocks=2_000_000):
    """Hierarchically find single cells meeting the boxes where ``passes`` fails.

    ``passes(vlo, vhi) -> mask`` decides a block from the interval of ``V`` over it.
    Returns failing cell index rows, the value interval on them and the index of
    the box each cell came from.
    """
    lo, hi = cell_blocks_touching(disc, boxes_lo, boxes_hi)
    origin = np.arange(len(lo))
    fails, vals_lo, vals_hi, owners = [], [], [], []
    while len(lo):
        if len(lo) > limit_blocks:
            raise MemoryError("too many failing cells; the candidate is far from valid")
        blo, bhi = cell_box(disc, lo, hi)
        vlo, vhi = _ibp_scalar(V, blo, bhi)
        ok = passes(vlo, vhi)
        bad = ~ok
        single = np.all(lo == hi, axis=1)
        leaf = bad & single
        if leaf.any():
            fails.append(lo[leaf])
            vals_lo.append(vlo[leaf])
            vals_hi.append(vhi[leaf])
            owners.append(origin[leaf])
        grow = bad & ~single
        if not grow.any():
            break
        lo, hi = split_blocks(lo[grow], hi[grow])
        origin = np.concatenate([origin[grow], origin[grow]])
    d = disc.dim
    if not fails:
        return np.zeros((0, d), np.int64), np.zeros(0), np.zeros(0), np.zeros(0, np.int64)
    return (np.concatenate(fails), np.concatenate(vals_lo), np.concatenate(vals_hi),
            np.concatenate(owners))


def _witnesses(disc, cells, owners, blo_origin, bhi_origin):
    """A point of ``cell`` inside the box the cell was found from."""
    clo, chi = cell_box(disc, cells, cells)
    center = 0.5 * (clo + chi)
    lo = np.maximum(clo, blo_origin[owners])
    hi = np.minimum(chi, bhi_origin[owners])
    return np.clip(center, lo, hi)


def _within_some_box(lo, hi, blo, bhi):
    if len(blo) == 0:
        return np.zeros(len(lo), dtype=bool)
    inside = np.all((lo[:, None, :] >= blo[None]) & (hi[:, None, :] <= bhi[None]), axis=2)
    return inside.any(axis=1)


def local_constants(system: StochasticSystem, policy, V: Mlp, disc: Discretization,
                    verts: np.ndarray, K_global: float) -> np.ndarray:
    """Per-vertex replacement for ``K`` built from local Lipschitz constants.

    For a state ``x`` within ``tau`` of vertex ``v`` both lie in the cells around
    ``v`` (box ``N``), and every successor of either lies in the box ``R``
    reachable from ``N`` in one step. With constants restricted to ``N`` and
    ``R`` the slack ``L_V(N) + L_V(R) * (max|a| + max|b| L_pi(N))`` plays the
    role of ``K``, using the exact gains of the diagonal dynamics in place of
    ``L_f``; it is capped at the global constant.
    """
    nlo, nhi = vertex_neighbourhood(disc, verts, verts)
    return box_constants(system, policy, V, nlo, nhi, K_global)


def box_constants(system: StochasticSystem, policy, V: Mlp, blo: np.ndarray, bhi: np.ndarray,
                  K_global: float) -> np.ndarray:
    """Local slack constants for states ranging over the boxes ``[blo, bhi]``."""
    out = np.empty(len(blo))
    # the dynamics are diagonal affine, so successors move by at most
    # max|a| |dx| + max|b| |du| in the L1 norm
    gx = float(np.max(np.abs(system.a)))
    gu = float(np.max(np.abs(system.b)))
    wlo, whi = system.noise.support
    wlo, whi = np.asarray(wlo, float)[None], np.asarray(whi, float)[None]
    for s in range(0, len(blo), CHUNK):
        nlo, nhi = blo[s:s + CHUNK], bhi[s:s + CHUNK]
        LVn = local_lipschitz(V, nlo, nhi)
        if isinstance(policy, Mlp):
            Lpn = local_lipschitz(policy, nlo, nhi)
            ulo, uhi = ibp_forward(policy, nlo, nhi)
        else:
            Lpn = np.full(len(nlo), policy_lipschitz(policy))
            alo, ahi = system.action_space.lo, system.action_space.hi
            ulo = np.broadcast_to(np.asarray(alo, float), nlo.shape)
            uhi = np.broadcast_to(np.asarray(ahi, float), nlo.shape)
        a, b, g = (np.asarray(v) for v in (system.a, system.b, system.g))
        ulo = system.clip_action(ulo)
        uhi = system.clip_action(uhi)
        rlo = (np.minimum(a * nlo, a * nhi) + np.minimum(b * ulo, b * uhi)
               + np.minimum(g * wlo, g * whi))
        rhi = (np.maximum(a * nlo, a * nhi) + np.maximum(b * ulo, b * uhi)
               + np.maximum(g * wlo, g * whi))
        rlo, rhi = np.nextafter(rlo, -np.inf), np.nextafter(rhi, np.inf)
        rlo = np.clip(rlo, system.state_space.lo, system.state_space.hi)
        rhi = np.clip(rhi, system.state_space.lo, system.state_space.hi)
        LVr = local_lipschitz(V, rlo, rhi)
        out[s:s + CHUNK] = LVn + LVr * (gx + gu * Lpn)
    return np.minimum(out, K_global)


def trigger_vertices(V: Mlp, disc: Discretization, task: ReachAvoidTask, lam: float) -> np.ndarray:
    """Grid vertices that need the decrease check, as index rows."""
    tlo, thi = task.target.arrays()
    n = np.array(disc.counts)
    lo = np.zeros((1, disc.dim), np.int64)
    hi = n[None].copy()
    found = []
    while len(lo):
        nlo, nhi = vertex_neighbourhood(disc, lo, hi)
        in_target = _within_some_box(nlo, nhi, tlo, thi)
        keep = ~in_target
        if keep.any():
            vlo, _ = _ibp_scalar(V, nlo[keep], nhi[keep])
            idx = np.flatnonzero(keep)
            keep[idx[vlo > lam]] = False
        single = np.all(lo == hi, axis=1)
        leaf = keep & single
        if leaf.any():
            found.append(lo[leaf])
        grow = keep & ~single
        if not grow.any():
            break
        lo, hi = split_blocks(lo[grow], hi[grow])
    if not found:
        return np.zeros((0, disc.dim), np.int64)
    return np.concatenate(found)


def verify_candidate(system: StochasticSystem, policy, V: Mlp, lam: float, task: ReachAvoidTask,
                     disc: Discretization, config: TrainConfig | None = None):
    """Return :class:`Certified` or :class:`Counterexamples` for the candidate pair."""
    config = config or TrainConfig()
    if not lam > 1:
        raise ValueError("lambda must exceed 1")
    if not V.all_finite() or (isinstance(policy, Mlp) and not policy.all_finite()):
        raise ValueError("networks must have finite parameters")
    d = system.dim
    hashes = dict(system_hash=system_hash(system),
                  policy_hash=hashlib.sha256(net_bytes(policy)).hexdigest()
                  if isinstance(policy, Mlp) else "",
                  certificate_hash=hashlib.sha256(net_bytes(V)).hexdigest())
    if task.trivial:
        return Certified(trivial_certificate(**hashes), 0, float("inf"))

    L_V = lipschitz_bound(V)
    L_pi = policy_lipschitz(policy)
    L_f = system.lipschitz_f
    K = L_V * (L_f * (L_pi + 1.0) + 1.0)
    notes = []

    # nonnegativity is structural for softplus heads; check it otherwise
    neg_pts = np.zeros((0, d))
    neg_viol = np.zeros(0)
    if V.head != "softplus":
        slo, shi = np.array([system.state_space.lo]), np.array([system.state_space.hi])
        cells, vlo, _, own = _sweep_cells(V, disc, slo, shi, lambda a, b: a >= 0.0)
        neg_pts = _witnesses(disc, cells, own, slo, shi)
        neg_viol = -vlo
        if len(cells):
            notes.append(f"{len(cells)} cells where V may be negative")

    ilo, ihi = task.initial.arrays()
    cells, _, vhi, own = _sweep_cells(V, disc, ilo, ihi, lambda a, b: b <= 1.0)
    init_pts = _witnesses(disc, cells, own, ilo, ihi)
    init_viol = vhi - 1.0

    ulo, uhi = task.unsafe.arrays()
    cells, vlo, _, own = _sweep_cells(V, disc, ulo, uhi, lambda a, b: a >= lam)
    unsafe_pts = _witnesses(disc, cells, own, ulo, uhi)
    unsafe_viol = lam - vlo

    verts = trigger_vertices(V, disc, task, lam)
    x = disc.vertex(verts) if len(verts) else np.zeros((0, d))
    if len(x):
        v_lo, _ = ibp_forward(V, x, x)
        e_up = expected_value_upper(V, system, policy, x, config.noise_resolution)
        local = config.lipschitz_mode == "local"
        Kv = local_constants(system, policy, V, disc, verts, K) if local else K
        margin = v_lo[:, 0] - disc.tau * Kv - e_up
    else:
        margin = np.zeros(0)
    min_margin = float(margin.min()) if len(margin) else float(lam)
    dec_bad = margin <= 0
    dec_pts = np.concatenate([x[dec_bad], neg_pts])
    dec_viol = np.concatenate([-margin[dec_bad], neg_viol])

    if len(init_pts) == 0 and len(unsafe_pts) == 0 and len(dec_pts) == 0:
        cert = make_certificate(lam, min_margin, disc.tau, L_V, L_f, L_pi, system.max_step,
                                local_lipschitz=config.lipschitz_mode == "local", **hashes)
        return Certified(cert, len(x), min_margin)

    def order(p, v):
        o = np.argsort(-v, kind="stable")
        return p[o], v[o]

    init_pts, init_viol = order(init_pts, init_viol)
    unsafe_pts, unsafe_viol = order(unsafe_pts, unsafe_viol)
    dec_pts, dec_viol = order(dec_pts, dec_viol)
    return Counterexamples(CounterexampleSets(init_pts, unsafe_pts, dec_pts), init_viol,
                           unsafe_viol, dec_viol, len(x), min_margin, notes)
