"""Policy initialization by episodic policy gradient (REINFORCE with a baseline)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..nn import Adam, Mlp, backward, forward, forward_tape, init_mlp
from ..system import ReachAvoidTask, StochasticSystem, mc_reach_avoid
from .config import TrainConfig

log = logging.getLogger(__name__)


@dataclass
class PretrainResult:
    policy: Mlp
    estimate: float
    iterations: int
    warning: str = ""


def region_distance(points: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """L1 distance from each point to a union of boxes (inf for the empty union)."""
    if len(lo) == 0:
        return np.full(len(points), np.inf)
    gap = np.maximum(lo[None] - points[:, None, :], 0.0) + np.maximum(points[:, None, :] - hi[None], 0.0)
    return gap.sum(axis=2).min(axis=1)


def new_policy(system: StochasticSystem, config: TrainConfig, rng: np.random.Generator) -> Mlp:
    sizes = [system.dim, *config.policy_hidden, system.dim]
    return init_mlp(sizes, "tanh", rng, system.action_space.lo, system.action_space.hi, out_scale=0.1)


def path_lipschitz(net: Mlp) -> float:
    """Lipschitz bound from the entrywise product ``|W_L| ... |W_1|`` (head slope folded in).

    Never larger than :func:`lipschitz_bound`, and it is the quantity the local
    verifier constants reduce to when every unit may be active.
    """
    P = np.abs(net.weights[0])
    for W in net.weights[1:]:
        P = np.abs(W) @ P
    if net.head == "tanh":
        P = P * net._half[:, None]
    return float(P.sum(axis=0).max())


def project_lipschitz(net: Mlp, limit: float) -> None:
    """Scale every layer by the same factor so the path bound is at most ``limit``."""
    L = path_lipschitz(net)
    if L > limit:
        f = (limit / L) ** (1.0 / len(net.weights))
        for W in net.weights:
            W *= f


def free_starts(system: StochasticSystem, task: ReachAvoidTask, rng: np.random.Generator,
                n: int) -> np.ndarray:
    """Uniform states of the space outside both the target and the unsafe set."""
    space = system.state_space
    out = np.zeros((0, system.dim))
    for _ in range(100):
        if len(out) >= n:
            break
        x = rng.uniform(space.lo, space.hi, size=(4 * n + 16, system.dim))
        x = x[~task.target.contains_many(x) & ~task.unsafe.contains_many(x)]
        out = np.concatenate([out, x])
    if len(out) < n:
        return task.initial.sample(rng, n)
    return out[:n]


def pretrain_policy(system: StochasticSystem, task: ReachAvoidTask, config: TrainConfig,
                    rng: np.random.Generator, policy: Mlp | None = None,
                    sigma: float = 0.3, wall_band: float = 0.1, wall_weight: float = 5.0, progress: float = 10.0,
                    discount: float = 0.95,
                    episodes: int = 400) -> PretrainResult:
    """Train a tanh-headed policy on a shaped reward.

    Half of each batch starts in the initial set and half uniformly in the
    safe non-target states, so the policy is trained everywhere a certificate
    has to decrease, not only along the paths leaving the initial set.

    Reward per step is the decrease of the L1 distance to the target minus a
    penalty that grows as the state approaches the unsafe set; reaching the
    target ends the episode with a bonus and touching the unsafe set with a
    penalty. Returns are discounted so that arriving sooner pays. Rewarding
    progress rather than charging distance keeps early
    termination in the unsafe set from looking attractive.
    After every step the weights are scaled back onto the Lipschitz budget
    ``config.policy_lipschitz_threshold``, which the verifier's slack depends on.
    Runs all ``config.pretrain_iters`` iterations (the rest of the state space
    keeps improving after the initial set is served) and warns when the final
    Monte Carlo estimate stays below ``config.pretrain_floor``.
    """
    policy = policy.copy() if policy is not None else new_policy(system, config, rng)
    project_lipschitz(policy, config.policy_lipschitz_threshold)
    if task.trivial:
        return PretrainResult(policy, 1.0, 0)
    tlo, thi = task.target.arrays()
    ulo, uhi = task.unsafe.arrays()
    opt = Adam(policy.params(), lr=config.pretrain_lr)
    H, B = config.pretrain_horizon, config.pretrain_batch
    horizon = 4 * H
    seed = int(rng.integers(2**31))
    est = mc_reach_avoid(system, policy, task, horizon, episodes, seed).estimate
    it = 0
    check_every = max(1, config.pretrain_iters // 10)
    for it in range(1, config.pretrain_iters + 1):
        x = np.concatenate([task.initial.sample(rng, B - B // 2), free_starts(system, task, rng, B // 2)])
        alive = np.ones(B, dtype=bool)
        xs, us, mus, rewards, masks = [], [], [], [], []
        for t in range(H):
            mu = forward(policy, x)
            u = system.clip_action(mu + sigma * rng.standard_normal(mu.shape))
            w = system.noise.sample(rng, B)
            xn = system.step(x, u, w)
            hit = task.target.contains_many(xn)
            bad = task.unsafe.contains_many(xn)
            dn = region_distance(xn, tlo, thi)
            r = progress * (region_distance(x, tlo, thi) - dn)
            near = region_distance(xn, ulo, uhi)
            r = r - wall_weight * np.maximum(wall_band - near, 0.0)
            r = np.where(hit, r + 10.0, r)
            r = np.where(bad, r - 10.0, r)
            xs.append(x)
            us.append(u)
            mus.append(mu)
            rewards.append(np.where(alive, r, 0.0))
            masks.append(alive.copy())
            alive = alive & ~hit & ~bad
            x = xn
            if not alive.any():
                break
        R = np.array(rewards)
        G = np.zeros_like(R)
        acc = np.zeros(R.shape[1])
        for t in range(len(R) - 1, -1, -1):
            acc = R[t] + discount * acc
            G[t] = acc
        M = np.array(masks)
        base = (G * M).sum(axis=1, keepdims=True) / np.maximum(M.sum(axis=1, keepdims=True), 1)
        A = (G - base) * M
        std = A[M].std() if M.any() else 1.0
        A = A / (std + 1e-8)
        X = np.concatenate(xs)
        U = np.concatenate(us)
        MU = np.concatenate(mus)
        Aflat = A.reshape(-1)
        keep = M.reshape(-1)
        tape = forward_tape(policy, X[keep])
        # ascend sum A * log N(u; mu, sigma): d/dmu = A (u - mu) / sigma^2
        dmu = -(Aflat[keep, None] * (U[keep] - MU[keep]) / sigma**2) / B
        grads, _ = backward(policy, tape, dmu)
        opt.step(grads)
        project_lipschitz(policy, config.policy_lipschitz_threshold)
        if it % check_every == 0 or it == config.pretrain_iters:
            est = mc_reach_avoid(system, policy, task, horizon, episodes, seed).estimate
            log.debug("pretrain iter %d estimate %.3f", it, est)
    warning = ""
    if est < config.pretrain_floor:
        warning = f"pretraining reached estimate {est:.3f} below floor {config.pretrain_floor}"
        log.warning(warning)
    return PretrainResult(policy, est, it, warning)
