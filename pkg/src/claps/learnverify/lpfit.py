"""Certificates from a fixed dictionary of hinge features, fitted by linear programming.

``V(x) = b + sum_j w_j relu(s_j (x_{i_j} - c_j))`` with ``w >= 0`` and ``b > 0``.
For this class every quantity the verifier computes is linear in ``(w, b)``:
point values, interval bounds over boxes, the noise-cell upper bound of the
expectation and the per-dimension sums of active weights that make up the
local Lipschitz constants. The three certificate conditions become linear
constraints, imposed on a growing set of states fed by verifier
counterexamples (cutting planes), while the policy stays fixed.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import csr_matrix, hstack, vstack

from ..nn import Mlp, ibp_forward
from ..system import ReachAvoidTask, StochasticSystem
from .config import TrainConfig
from .grid import Discretization, vertex_neighbourhood
from .verifier import _next_state_boxes, policy_interval, verify_candidate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HingeDictionary:
    """Units ``relu(a_j . x - c_j)`` for fixed directions ``a_j`` and offsets ``c_j``."""

    directions: np.ndarray   # (k, d)
    offsets: np.ndarray      # (k,)

    @classmethod
    def on_box(cls, lo, hi, spacing: float, diagonals: bool = True) -> "HingeDictionary":
        """Axis and (optionally) diagonal directions, offsets every ``spacing`` across the box."""
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        d = len(lo)
        dirs = [s * np.eye(d)[i] for i in range(d) for s in (1.0, -1.0)]
        if diagonals:
            for i in range(d):
                for j in range(i + 1, d):
                    for si in (1.0, -1.0):
                        for sj in (1.0, -1.0):
                            a = np.zeros(d)
                            a[i], a[j] = 0.5 * si, 0.5 * sj
                            dirs.append(a)
        A, C = [], []
        for a in dirs:
            top = np.sum(np.maximum(a * lo, a * hi))
            bot = np.sum(np.minimum(a * lo, a * hi))
            n = max(1, int(np.ceil((top - bot) / spacing - 1e-9)))
            c = np.linspace(bot, top, n + 1)
            A.append(np.repeat(a[None], len(c), axis=0))
            C.append(c)
        return cls(np.concatenate(A), np.concatenate(C))

    def __len__(self) -> int:
        return len(self.offsets)

    def values(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x @ self.directions.T - self.offsets[None], 0.0)

    def _range(self, lo, hi):
        Ap, An = np.maximum(self.directions, 0.0), np.minimum(self.directions, 0.0)
        top = hi @ Ap.T + lo @ An.T - self.offsets[None]
        bot = lo @ Ap.T + hi @ An.T - self.offsets[None]
        return bot, top

    def upper(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Unit maxima over boxes (what interval propagation returns)."""
        return np.maximum(self._range(lo, hi)[1], 0.0)

    def lower(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        return np.maximum(self._range(lo, hi)[0], 0.0)

    def active(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Units whose pre-activation can be positive on each box."""
        return (self._range(lo, hi)[1] > 0).astype(float)

    def to_mlp(self, w: np.ndarray, b: float, keep_tol: float = 1e-9) -> Mlp:
        keep = w > keep_tol
        if not keep.any():
            keep[0] = True
        return Mlp([self.directions[keep], w[keep][None, :]], [-self.offsets[keep], np.array([b])],
                   "identity")


@dataclass
class LpFitResult:
    V: Mlp | None
    certified: bool
    result: object = None
    rounds: int = 0
    margin: float = float("nan")
    history: list[dict] = field(default_factory=list)


def _grid_in(lo, hi, spacing):
    axes = [np.linspace(a, b, max(2, int(np.ceil((b - a) / spacing)) + 1)) for a, b in zip(lo, hi)]
    m = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in m], axis=1)


def _pieces(lo, hi, side):
    """Split a box into pieces no wider than ``side``."""
    axes = []
    for a, b in zip(lo, hi):
        n = max(1, int(np.ceil((b - a) / side - 1e-9)))
        axes.append(np.linspace(a, b, n + 1))
    m = np.meshgrid(*[np.arange(len(ax) - 1) for ax in axes], indexing="ij")
    idx = np.stack([g.reshape(-1) for g in m], axis=1)
    plo = np.stack([axes[i][idx[:, i]] for i in range(len(axes))], axis=1)
    phi = np.stack([axes[i][idx[:, i] + 1] for i in range(len(axes))], axis=1)
    return plo, phi


class LinearCertificateFit:
    """Cutting-plane search for a hinge-dictionary certificate of a fixed policy."""

    def __init__(self, system: StochasticSystem, task: ReachAvoidTask, policy, disc: Discretization,
                 config: TrainConfig, spacing: float = 0.02, piece: float = 0.1, diagonals: bool = True,
                 seed_spacing: float = 0.05, max_margin: float = 0.05):
        self.system, self.task, self.policy = system, task, policy
        self.disc, self.config = disc, config
        space = system.state_space
        # units only need to bend where the certificate matters: around the safe states
        safe = task.unsafe.complement_within(space)
        box = safe.bounding_box() if not safe.is_empty else space
        reach = 2.0 * system.max_step
        self.box_lo = np.maximum(np.asarray(box.lo, float) - reach, space.lo)
        self.box_hi = np.minimum(np.asarray(box.hi, float) + reach, space.hi)
        self.dic = HingeDictionary.on_box(self.box_lo, self.box_hi, spacing, diagonals)
        self.max_margin = max_margin
        d = system.dim
        h = disc.h
        self.gx = float(np.max(np.abs(system.a)))
        self.gu = float(np.max(np.abs(system.b)))
        # initial cells: the whole initial box widened by one cell
        ilo, ihi = task.initial.arrays()
        self.init_lo = np.maximum(ilo - h, space.lo)
        self.init_hi = np.minimum(ihi + h, space.hi)
        ulo, uhi = task.unsafe.arrays()
        plo, phi = [], []
        for a, b in zip(ulo, uhi):
            p, q = _pieces(np.maximum(a - h, space.lo), np.minimum(b + h, space.hi), piece)
            plo.append(p)
            phi.append(q)
        self.unsafe_lo = np.concatenate(plo) if plo else np.zeros((0, d))
        self.unsafe_hi = np.concatenate(phi) if phi else np.zeros((0, d))
        seeds = _grid_in(self.box_lo, self.box_hi, seed_spacing)
        keep = ~task.target.contains_many(seeds) & ~task.unsafe.contains_many(seeds)
        self.dec_points = np.zeros((0, d))
        self.dec_rows = np.zeros((0, len(self.dic)))
        self.dec_owner = np.zeros(0, np.int64)   # decrease point behind each row
        self.add_decrease_points(seeds[keep])

    # -- linear rows ------------------------------------------------------
    def _dec_rows(self, x: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Rows ``r`` with ``r . w <= -margin`` expressing the decrease condition at ``x``."""
        if len(x) > chunk:
            return np.concatenate([self._dec_rows(x[s:s + chunk], chunk)
                                   for s in range(0, len(x), chunk)])
        sysm, dic, disc = self.system, self.dic, self.disc
        d = sysm.dim
        M = self.config.noise_resolution
        wlo, whi, wts = sysm.noise.partition(M)
        ulo, uhi = policy_interval(self.policy, x)
        lo, hi = _next_state_boxes(sysm, x, ulo, uhi, wlo, whi)
        m = len(wts)
        E = (dic.upper(lo.reshape(-1, d), hi.reshape(-1, d)).reshape(len(x), m, -1)
             * wts[None, :, None]).sum(axis=1)
        Vx = dic.values(x)
        idx = np.rint((x - np.array(disc.space.lo)) / disc.h).astype(np.int64)
        nlo, nhi = vertex_neighbourhood(disc, idx, idx)
        nlo = np.minimum(nlo, x)
        nhi = np.maximum(nhi, x)
        Pn = self._active_by_dim(nlo, nhi)
        rlo, rhi, Lpn = self._reach_boxes(nlo, nhi)
        Pr = self._active_by_dim(rlo, rhi)
        tau = disc.tau
        gain = tau * (self.gx + self.gu * Lpn)[:, None]
        # margin = V(x) - tau (max_i S_i(N) + gain max_k S_k(R)) - E >= delta, one row per (i, k)
        rows = [E - Vx + tau * Pn[:, i] + gain * Pr[:, k] for i in range(d) for k in range(d)]
        return np.stack(rows, axis=1).reshape(-1, len(dic))

    def add_decrease_points(self, pts: np.ndarray):
        pts = np.unique(pts, axis=0)
        if len(self.dec_points):
            old = {tuple(p) for p in self.dec_points}
            pts = np.array([p for p in pts if tuple(p) not in old]).reshape(-1, self.system.dim)
        if len(pts):
            d = self.system.dim
            first = len(self.dec_points)
            self.dec_points = np.concatenate([self.dec_points, pts])
            self.dec_rows = np.concatenate([self.dec_rows, self._dec_rows(pts)])
            owner = np.repeat(np.arange(first, first + len(pts)), d * d)
            self.dec_owner = np.concatenate([self.dec_owner, owner])

    def _active_by_dim(self, lo, hi):
        """Weight of each unit in the per-input column sums of the local Lipschitz bound."""
        act = self.dic.active(lo, hi)
        return act[:, None, :] * np.abs(self.dic.directions.T)[None]

    def _reach_boxes(self, nlo, nhi):
        from ..nn import local_lipschitz
        sysm = self.system
        a, b, g = (np.asarray(v) for v in (sysm.a, sysm.b, sysm.g))
        if isinstance(self.policy, Mlp):
            Lpn = local_lipschitz(self.policy, nlo, nhi)
            ulo, uhi = ibp_forward(self.policy, nlo, nhi)
        else:
            Lpn = np.full(len(nlo), float(self.policy.lipschitz))
            ulo = np.broadcast_to(np.asarray(sysm.action_space.lo, float), nlo.shape)
            uhi = np.broadcast_to(np.asarray(sysm.action_space.hi, float), nlo.shape)
        ulo, uhi = sysm.clip_action(ulo), sysm.clip_action(uhi)
        wlo, whi = (np.asarray(v, float)[None] for v in sysm.noise.support)
        rlo = (np.minimum(a * nlo, a * nhi) + np.minimum(b * ulo, b * uhi)
               + np.minimum(g * wlo, g * whi))
        rhi = (np.maximum(a * nlo, a * nhi) + np.maximum(b * ulo, b * uhi)
               + np.maximum(g * wlo, g * whi))
        s = sysm.state_space
        return np.clip(rlo, s.lo, s.hi), np.clip(rhi, s.lo, s.hi), Lpn

    # -- solve ------------------------------------------------------------
    def solve(self, lam: float, sparsity: float = 1e-4, elastic: float | None = None):
        """One LP over the current constraint sets; returns ``(w, b, delta)`` or None.

        With ``elastic`` set, the margin is fixed to that value and each
        decrease point gets a nonnegative violation variable whose sum is
        minimized instead; the fit then exists for any policy and shows where
        the policy is at fault. The violations are returned as a fourth item.
        """
        n = len(self.dic)
        P = len(self.dec_points) if elastic is not None else 0
        nv = n + 2 + P   # w, b, delta, per-point violations
        blocks, rhs = [], []

        def add(F, bcoef, dcoef, r, owner=None):
            if len(F) == 0:
                return
            A = np.concatenate([F, np.full((len(F), 1), bcoef), np.full((len(F), 1), dcoef)], axis=1)
            A = csr_matrix(A * (np.abs(A) > 1e-14))
            if P:
                if owner is None:
                    S = csr_matrix((len(F), P))
                else:
                    S = csr_matrix((-np.ones(len(F)), (np.arange(len(F)), owner)), shape=(len(F), P))
                A = hstack([A, S])
            blocks.append(A)
            rhs.append(np.full(len(F), r))

        # V_up(initial) <= 1 - delta
        add(self.dic.upper(np.atleast_2d(self.init_lo), np.atleast_2d(self.init_hi)), 1.0, 1.0, 1.0)
        # V_lo(unsafe piece) >= lam + delta
        add(-self.dic.lower(self.unsafe_lo, self.unsafe_hi), -1.0, 1.0, -lam)
        # expectation rows already move V(x) to the left: (E - V + tau S) w + 0 b + delta <= 0
        add(self.dec_rows, 0.0, 1.0, 0.0, self.dec_owner)
        A = vstack(blocks).tocsr()
        c = np.zeros(nv)
        c[:n] = sparsity
        if P:
            c[n + 2:] = 1.0
            bounds = [(0, None)] * n + [(1e-3, None), (elastic, elastic)] + [(0, None)] * P
        else:
            c[n + 1] = -1.0
            bounds = [(0, None)] * n + [(1e-3, None), (None, self.max_margin)]
        res = linprog(c, A_ub=A, b_ub=np.concatenate(rhs), bounds=bounds, method="highs")
        if res.status != 0:
            return None
        z = res.x
        if P:
            return z[:n], float(z[n]), float(z[n + 1]), z[n + 2:]
        return z[:n], float(z[n]), float(z[n + 1])

    def elastic_fit(self, lam: float, margin: float = 0.01):
        """Least-violation certificate at fixed margin and the decrease points it fails on."""
        sol = self.solve(lam, elastic=margin)
        if sol is None:
            return None, np.zeros((0, self.system.dim)), float("inf")
        w, b, _, viol = sol
        bad = viol > 1e-7
        return self.dic.to_mlp(w, b), self.dec_points[bad], float(viol.sum())

    def run(self, lam: float, max_rounds: int = 12, deadline: float | None = None,
            per_round: int = 4000) -> LpFitResult:
        hist = []
        V = None
        for rnd in range(1, max_rounds + 1):
            if deadline is not None and time.monotonic() > deadline:
                break
            sol = self.solve(lam)
            if sol is None:
                hist.append(dict(round=rnd, status="lp failed"))
                return LpFitResult(V, False, None, rnd, float("nan"), hist)
            w, b, delta = sol
            if delta <= 0:
                hist.append(dict(round=rnd, delta=delta, status="infeasible"))
                log.info("hinge fit at lambda %.4g infeasible (margin %.3g)", lam, delta)
                return LpFitResult(V, False, None, rnd, delta, hist)
            V = self.dic.to_mlp(w, b)
            res = verify_candidate(self.system, self.policy, V, lam, self.task, self.disc, self.config)
            rec = dict(round=rnd, delta=delta, ok=res.ok, units=V.sizes[1],
                       rows=len(self.dec_points))
            hist.append(rec)
            if res.ok:
                return LpFitResult(V, True, res, rnd, res.min_margin, hist)
            rec["counterexamples"] = res.sets.sizes()
            log.info("hinge fit round %d: margin %.3g, counterexamples %s", rnd, delta,
                     res.sets.sizes())
            self._absorb(res.sets, per_round)
        return LpFitResult(V, False, None, len(hist), float("nan"), hist)

    def _absorb(self, sets, per_round):
        h = self.disc.h
        space = self.system.state_space
        if len(sets.dec):
            self.add_decrease_points(self.disc.nearest_vertex(sets.dec[:per_round]))
        if len(sets.unsafe):
            p = sets.unsafe[:per_round]
            self.unsafe_lo = np.concatenate([self.unsafe_lo, np.maximum(p - h, space.lo)])
            self.unsafe_hi = np.concatenate([self.unsafe_hi, np.minimum(p + h, space.hi)])
        if len(sets.init):
            # the initial row already covers the widened box; shrink the margin cap instead
            self.max_margin *= 0.5


def repair_policy(system: StochasticSystem, task: ReachAvoidTask, policy: Mlp, V: Mlp,
                  points: np.ndarray, lam: float, config: TrainConfig, rng: np.random.Generator,
                  steps: int) -> None:
    """Gradient steps on the decrease loss for the policy alone, against a fixed ``V``.

    ``points`` are the states where ``V`` could not be made to decrease; fresh
    uniform states are mixed in by the trainer. The path Lipschitz bound is
    projected back onto ``config.policy_lipschitz_threshold`` after each step.
    """
    from .learner import JointTrainer
    from .pretrain import project_lipschitz
    from .verifier import CounterexampleSets

    d = system.dim
    z = np.zeros((0, d))
    sets = CounterexampleSets(z, z.copy(), np.asarray(points, float).reshape(-1, d))
    trainer = JointTrainer(system, task, policy, V, config.override(train_policy=True), rng,
                           train_certificate=False)
    for _ in range(steps):
        trainer.step(sets, lam)
        project_lipschitz(policy, config.policy_lipschitz_threshold)
