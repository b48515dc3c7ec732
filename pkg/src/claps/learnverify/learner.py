"""Learner side of the loop: loss terms and joint gradient steps for (policy, certificate)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn import Adam, Mlp, backward, forward, forward_tape, lipschitz_bound, lipschitz_grad
from ..system import ReachAvoidTask, StochasticSystem
from .config import TrainConfig
from .verifier import CounterexampleSets, box_constants


@dataclass
class Losses:
    init: float
    unsafe: float
    decrease: float
    lipschitz: float

    @property
    def total(self) -> float:
        return self.init + self.unsafe + self.decrease + self.lipschitz


def _grid_points(lo, hi, n):
    axes = [np.linspace(l, u, n) for l, u in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def initial_sets(system: StochasticSystem, task: ReachAvoidTask, per_dim: int) -> CounterexampleSets:
    """Finite discretizations of the initial set, the unsafe set and the non-target states."""
    space = system.state_space
    pts = _grid_points(space.lo, space.hi, per_dim)
    init = [_grid_points(b.lo, b.hi, max(3, per_dim // 4)) for b in task.initial.boxes]
    init = np.concatenate(init)
    unsafe = [pts[task.unsafe.contains_many(pts)]]
    for b in task.unsafe.boxes:
        q = _grid_points(b.lo, b.hi, 3)
        unsafe.append(q)
    unsafe = np.concatenate(unsafe) if unsafe else np.zeros((0, system.dim))
    dec = pts[~task.target.contains_many(pts)]
    return CounterexampleSets(init, unsafe, dec)


def verifier_constant_of(V: Mlp, policy: Mlp, system: StochasticSystem) -> float:
    return lipschitz_bound(V) * (system.lipschitz_f * (lipschitz_bound(policy) + 1.0) + 1.0)


def compute_losses(V: Mlp, policy: Mlp, sets: CounterexampleSets, lam: float, config: TrainConfig,
                   system: StochasticSystem, rng: np.random.Generator) -> Losses:
    """The four learner losses on the full counterexample sets.

    Init and unsafe terms are worst-case hinges, the decrease term averages a
    sampled one-step expectation hinge with slack ``tau * K`` over all stored
    non-target states, and the Lipschitz term hinges both product bounds.
    """
    l_init = 0.0
    if len(sets.init):
        l_init = float(max(np.max(forward(V, sets.init)[:, 0]) - 1.0, 0.0))
    l_unsafe = 0.0
    if len(sets.unsafe):
        l_unsafe = float(max(lam - np.min(forward(V, sets.unsafe)[:, 0]), 0.0))
    l_dec = 0.0
    if len(sets.dec):
        K = verifier_constant_of(V, policy, system)
        x = sets.dec
        v = forward(V, x)[:, 0]
        u = forward(policy, x)
        S = config.noise_samples
        w = system.noise.sample(rng, len(x) * S)
        xn = system.step(np.repeat(x, S, axis=0), np.repeat(u, S, axis=0), w)
        ev = forward(V, xn)[:, 0].reshape(len(x), S).mean(axis=1)
        hinge = np.maximum(ev - v + config.mesh * K, 0.0)
        l_dec = float(hinge.mean())
    l_lip = config.lipschitz_weight * (
        max(lipschitz_bound(policy) - config.policy_lipschitz_threshold, 0.0)
        + max(lipschitz_bound(V) - config.lipschitz_threshold, 0.0))
    return Losses(l_init, l_unsafe, l_dec, l_lip)


def _add(acc, grads, scale=1.0):
    for a, g in zip(acc, grads):
        a += scale * g


class JointTrainer:
    """Adam on smoothed versions of the learner losses.

    Batches use mean hinges with small margins instead of the worst-case hinge,
    which gives a gradient at every violating sample; worst-case terms are kept
    with a smaller weight so the largest violation is still pulled down.
    """

    def __init__(self, system: StochasticSystem, task: ReachAvoidTask, policy: Mlp, V: Mlp,
                 config: TrainConfig, rng: np.random.Generator, train_certificate: bool = True):
        self.system, self.task, self.config, self.rng = system, task, config, rng
        self.train_certificate = train_certificate
        self.policy, self.V = policy, V
        self.opt_v = Adam(V.params(), lr=config.lr)
        self.opt_p = Adam(policy.params(), lr=config.lr * 0.2)
        self.space_lo = np.array(system.state_space.lo)
        self.space_w = system.state_space.widths

    def slack(self, x: np.ndarray) -> np.ndarray:
        """Decrease slack the verifier will charge near ``x``, plus ``dec_margin``."""
        cfg, sys = self.config, self.system
        K = verifier_constant_of(self.V, self.policy, sys)
        if cfg.lipschitz_mode == "global":
            return np.full(len(x), cfg.mesh * K + cfg.dec_margin)
        r = np.full(sys.dim, 2.0 * cfg.mesh / sys.dim)
        lo = np.maximum(x - r, sys.state_space.lo)
        hi = np.minimum(x + r, sys.state_space.hi)
        return cfg.mesh * box_constants(sys, self.policy, self.V, lo, hi, K) + cfg.dec_margin

    def _sample(self, pts, n):
        if len(pts) == 0:
            return pts
        return pts[self.rng.integers(0, len(pts), size=n)]

    def step(self, sets: CounterexampleSets, lam: float) -> float:
        cfg, V, pi, sys = self.config, self.V, self.policy, self.system
        gV = [np.zeros_like(p) for p in V.params()]
        gP = [np.zeros_like(p) for p in pi.params()]
        B = cfg.batch_size
        total = 0.0

        xi = self._sample(sets.init, B)
        if len(xi):
            tape = forward_tape(V, xi)
            v = tape.out[:, 0]
            viol = v - (1.0 - cfg.init_margin)
            act = viol > 0
            total += viol[act].sum() / B
            dout = act / B
            j = int(np.argmax(v))
            if v[j] > 1.0:
                dout[j] += 0.5
                total += 0.5 * (v[j] - 1.0)
            g, _ = backward(V, tape, dout[:, None])
            _add(gV, g)

        xu = self._sample(sets.unsafe, B)
        if len(xu):
            tape = forward_tape(V, xu)
            v = tape.out[:, 0]
            viol = (lam + cfg.unsafe_margin) - v
            act = viol > 0
            total += viol[act].sum() / B
            dout = -(act / B)
            j = int(np.argmin(v))
            if v[j] < lam:
                dout[j] -= 0.5
                total += 0.5 * (lam - v[j])
            g, _ = backward(V, tape, dout[:, None])
            _add(gV, g)

        # decrease: stored states plus fresh uniform states outside the target
        fresh = self.space_lo + self.rng.random((B, sys.dim)) * self.space_w
        fresh = fresh[~self.task.target.contains_many(fresh)]
        xd = np.concatenate([self._sample(sets.dec, B), fresh])
        if len(xd):
            slack = self.slack(xd)
            S = cfg.noise_samples
            n = len(xd)
            tv = forward_tape(V, xd)
            v = tv.out[:, 0]
            tp = forward_tape(pi, xd)
            u = tp.out
            w = sys.noise.sample(self.rng, n * S)
            ur = np.repeat(u, S, axis=0)
            z = (np.asarray(sys.a) * np.repeat(xd, S, axis=0) + np.asarray(sys.b) * sys.clip_action(ur)
                 + np.asarray(sys.g) * w)
            xn = np.clip(z, sys.state_space.lo, sys.state_space.hi)
            tn = forward_tape(V, xn)
            ev = tn.out[:, 0].reshape(n, S).mean(axis=1)
            hinge = ev - v + slack
            act = hinge > 0
            total += hinge[act].sum() / n
            coef = act / n
            g_next, gx_next = backward(V, tn, (np.repeat(coef, S) / S)[:, None])
            _add(gV, g_next)
            g_cur, _ = backward(V, tv, -(coef[:, None]))
            _add(gV, g_cur)
            if cfg.train_policy:
                # straight through the state clamp, so a policy pushing into the
                # boundary still feels the slope of V there
                du = (gx_next * np.asarray(sys.b)).reshape(n, S, sys.dim).sum(axis=1)
                gp, _ = backward(pi, tp, du)
                _add(gP, gp)

        t = cfg.lipschitz_weight
        LV, gl = lipschitz_grad(V)
        if LV > cfg.lipschitz_threshold:
            _add(gV, gl, t)
            total += t * (LV - cfg.lipschitz_threshold)
        if cfg.train_policy:
            LP, gl = lipschitz_grad(pi)
            if LP > cfg.policy_lipschitz_threshold:
                _add(gP, gl, t)
                total += t * (LP - cfg.policy_lipschitz_threshold)

        if self.train_certificate:
            self.opt_v.step(gV)
        if cfg.train_policy:
            self.opt_p.step(gP)
        return total

    def train(self, sets: CounterexampleSets, lam: float, steps: int) -> float:
        last = 0.0
        for _ in range(steps):
            last = self.step(sets, lam)
        return last
