"""Outer loops: the lambda schedule for one target probability, and the binary
search for the largest certifiable probability of an edge."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..nn import Mlp, init_mlp, lipschitz_bound
from ..rasm import Certificate, compute_bound, trivial_certificate
from ..system import ReachAvoidTask, StochasticSystem
from .config import TrainConfig
from .grid import Discretization
from .learner import JointTrainer, initial_sets
from .lpfit import LinearCertificateFit, repair_policy
from .pretrain import new_policy, pretrain_policy
from .verifier import verify_candidate

log = logging.getLogger(__name__)


@dataclass
class RasmResult:
    success: bool
    policy: Mlp | None
    V: Mlp | None
    certificate: Certificate | None
    history: list[dict] = field(default_factory=list)
    timed_out: bool = False

    @property
    def bound(self) -> float:
        return self.certificate.bound if self.certificate is not None else 0.0


def initial_lambda(p: float, gamma: float | None = None, L_V: float | None = None,
                   delta_step: float | None = None) -> float:
    """Smallest lambda whose bound reaches ``p`` given margin estimates.

    Without estimates this is ``1 / (1 - p)``, which needs no decrease factor.
    """
    top = 1.0 / (1.0 - p)
    if gamma is None or L_V is None or delta_step is None or gamma >= 1.0:
        return top
    lo, hi = 1.0 + 1e-9, top
    if compute_bound(lo * (1 + 1e-12), gamma, L_V, delta_step).bound >= p:
        return lo * (1 + 1e-12)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if compute_bound(mid, gamma, L_V, delta_step).bound >= p:
            hi = mid
        else:
            lo = mid
    return hi


def new_certificate_net(system: StochasticSystem, config: TrainConfig,
                        rng: np.random.Generator) -> Mlp:
    return init_mlp([system.dim, *config.hidden, 1], "softplus", rng, out_scale=0.3)


def policy_plus_rasm(system: StochasticSystem, task: ReachAvoidTask, p: float,
                     config: TrainConfig | None = None, policy: Mlp | None = None,
                     V: Mlp | None = None, deadline: float | None = None,
                     estimate: tuple[float, float] | None = None) -> RasmResult:
    """Learn a policy and a certificate showing reach-avoid probability at least ``p``.

    Lambda starts at :func:`initial_lambda` and shrinks geometrically toward 1
    for at least ``config.min_lambda_steps`` steps. At each lambda the learner
    named by ``config.learner`` runs learner-verifier rounds, feeding verifier
    counterexamples back:

    * ``hinge``: the certificate is fitted by linear programming over a hinge
      dictionary with the policy fixed; when no fit exists, the policy is
      repaired by gradient steps on the decrease loss against the
      least-violation fit, up to ``config.policy_repairs`` times;
    * ``gradient``: joint gradient steps on the four losses for both networks;
    * ``both``: hinge first, then gradient.

    ``policy`` and ``V`` warm start the search; ``estimate`` is a previous
    ``(gamma, L_V)`` pair. Stops at ``deadline`` (a ``time.monotonic`` value)
    if given, otherwise after ``config.timeout`` seconds.
    """
    config = config or TrainConfig()
    if not 0.0 <= p < 1.0:
        raise ValueError("target probability must lie in [0, 1)")
    rng = np.random.default_rng(config.seed)
    if deadline is None:
        deadline = time.monotonic() + config.timeout
    if task.trivial:
        pol = policy.copy() if policy is not None else new_policy(system, config, rng)
        Vn = V.copy() if V is not None else new_certificate_net(system, config, rng)
        return RasmResult(True, pol, Vn, trivial_certificate())
    if policy is None:
        pre = pretrain_policy(system, task, config, rng)
        policy = pre.policy
    else:
        policy = policy.copy()
    disc = Discretization.with_mesh(system.state_space, config.mesh, config.grid_budget)
    gamma, L_V = estimate if estimate is not None else (None, None)
    lam = max(initial_lambda(p, gamma, L_V, system.max_step), 1.0 + 1e-6)
    state = _SearchState(p)
    Vg = V.copy() if V is not None and V.head == "softplus" else new_certificate_net(system, config, rng)
    sets = initial_sets(system, task, config.grid_per_dim) if config.learner != "hinge" else None
    trainer = JointTrainer(system, task, policy, Vg, config, rng) if sets is not None else None
    for step in range(config.min_lambda_steps):
        if config.learner in ("hinge", "both"):
            done = _hinge_rounds(system, task, policy, lam, disc, config, rng, deadline, state, step)
            if done is not None:
                return done
        if config.learner in ("gradient", "both"):
            done = _gradient_rounds(system, task, policy, Vg, trainer, sets, lam, disc, config,
                                    deadline, state, step)
            if done is not None:
                return done
        if time.monotonic() > deadline:
            return state.finish(policy, Vg, timed_out=True)
        lam = 1.0 + (lam - 1.0) * config.lambda_decay
    return state.finish(policy, Vg)


@dataclass
class _SearchState:
    p: float
    history: list[dict] = field(default_factory=list)
    best: RasmResult | None = None

    def offer(self, policy, V, cert) -> RasmResult:
        cand = RasmResult(cert.bound >= self.p, policy.copy(), V.copy(), cert, self.history)
        if self.best is None or cand.bound > self.best.bound:
            self.best = cand
        return cand

    def finish(self, policy, V, timed_out: bool = False) -> RasmResult:
        out = self.best or RasmResult(False, policy, V, None)
        out.history, out.timed_out = self.history, timed_out
        out.success = out.certificate is not None and out.certificate.bound >= self.p
        return out


def _hinge_rounds(system, task, policy, lam, disc, config, rng, deadline, state, step):
    for repair in range(config.policy_repairs + 1):
        if time.monotonic() > deadline:
            return None
        fit = LinearCertificateFit(system, task, policy, disc, config, spacing=config.hinge_spacing)
        r = fit.run(lam, max_rounds=config.max_iters, deadline=deadline)
        for h in r.history:
            state.history.append(dict(h, learner="hinge", step=step, lam=lam, repair=repair))
        if r.certified:
            cert = r.result.certificate
            log.info("lambda %.4g certified by hinge fit, bound %.4f", lam, cert.bound)
            cand = state.offer(policy, r.V, cert)
            return cand if cand.success else None
        if not np.isfinite(r.margin) or repair == config.policy_repairs:
            # feasible fits that the verifier kept refuting, or no repairs left
            return None
        Ve, bad, total = fit.elastic_fit(lam)
        if Ve is None or len(bad) == 0:
            return None
        log.info("lambda %.4g: repairing policy on %d states (violation %.3g)", lam, len(bad), total)
        repair_policy(system, task, policy, Ve, bad, lam, config, rng, config.repair_steps)
    return None


def _gradient_rounds(system, task, policy, V, trainer, sets, lam, disc, config, deadline,
                     state, step):
    for it in range(config.max_iters):
        if time.monotonic() > deadline:
            return None
        loss = trainer.train(sets, lam, config.epochs_per_iter)
        res = verify_candidate(system, policy, V, lam, task, disc, config)
        rec = dict(learner="gradient", step=step, iter=it, lam=lam, loss=loss, ok=res.ok,
                   min_margin=res.min_margin, L_V=lipschitz_bound(V),
                   L_pi=lipschitz_bound(policy), checked=res.checked_vertices)
        if res.ok:
            rec["bound"] = res.certificate.bound
            state.history.append(rec)
            log.info("lambda %.4g certified, bound %.4f", lam, res.certificate.bound)
            cand = state.offer(policy, V, res.certificate)
            return cand if cand.success else None
        rec["counterexamples"] = res.sets.sizes()
        state.history.append(rec)
        log.info("lambda %.4g round %d: %s counterexamples, margin %.3g", lam, it,
                 res.sets.sizes(), res.min_margin)
        merged = sets.extend(res.sets, cap=2000)
        sets.init, sets.unsafe, sets.dec = merged.init, merged.unsafe, merged.dec
    return None


@dataclass
class SearchResult:
    policy: Mlp | None
    p_max: float
    certificate: Certificate | None
    V: Mlp | None = None
    probes: list[tuple[float, bool]] = field(default_factory=list)


def max_verified_probability(system: StochasticSystem, task: ReachAvoidTask,
                             precision: float | None = None, config: TrainConfig | None = None,
                             solver=None) -> SearchResult:
    """Binary search on the target probability.

    ``p_hi`` is probed first; then the interval ``[p_lo, p_hi]`` is halved
    until narrower than ``precision`` or ``max_probes`` solver calls were made.
    Each probe warm starts from the last successful networks. The result is 0
    with no certificate if nothing succeeded.
    ``solver(system, task, p, config, policy, V)`` defaults to :func:`policy_plus_rasm`.
    """
    config = config or TrainConfig()
    precision = config.precision if precision is None else precision
    if precision <= 0:
        raise ValueError("precision must be positive")
    solver = solver or (lambda s, t, p, c, pol, V: policy_plus_rasm(s, t, p, c, pol, V))
    if task.trivial:
        r = solver(system, task, config.p_hi, config, None, None)
        return SearchResult(r.policy, 1.0, r.certificate or trivial_certificate(), r.V,
                            [(1.0, True)])
    deadline = time.monotonic() + config.timeout
    probes: list[tuple[float, bool]] = []
    best = None
    policy = V = None

    def probe(p):
        nonlocal best, policy, V
        remaining = deadline - time.monotonic()
        cfg = config.override(timeout=max(remaining, 1e-3))
        r = solver(system, task, p, cfg, policy, V)
        probes.append((p, bool(r.success)))
        if r.success:
            best = (p, r)
            policy, V = r.policy, r.V
        return r.success

    lo, hi = config.p_lo, config.p_hi
    if probe(hi):
        return SearchResult(best[1].policy, hi, best[1].certificate, best[1].V, probes)
    while hi - lo > precision and len(probes) < config.max_probes:
        if time.monotonic() > deadline:
            break
        mid = 0.5 * (lo + hi)
        if probe(mid):
            lo = mid
        else:
            hi = mid
    if best is None:
        return SearchResult(None, 0.0, None, None, probes)
    return SearchResult(best[1].policy, best[0], best[1].certificate, best[1].V, probes)
