"""Stochastic discrete-time systems, noise laws, reach-avoid tasks and Monte
Carlo estimation of reach-avoid probabilities."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from . import _kernels
from .spectrl import Box, DimensionError, Region

BLOCK = 1024  # episodes per independently seeded block


class InvalidTaskError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TriangularNoise:
    """Independent symmetric triangular noise on ``[-c_i, c_i]`` with mode 0."""

    scale: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "scale", tuple(float(c) for c in self.scale))
        if any(c < 0 for c in self.scale):
            raise ValueError("noise scale must be nonnegative")

    @property
    def dim(self) -> int:
        return len(self.scale)

    @property
    def support(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.array(self.scale)
        return -c, c

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.zeros((n, self.dim))
        for j, c in enumerate(self.scale):
            if c > 0:
                out[:, j] = rng.triangular(-c, 0.0, c, size=n)
        return out

    def cdf(self, x, axis: int):
        return _kernels.triangular_cdf(x, self.scale[axis])

    def mass(self, lo, hi) -> float:
        """Probability of the box ``[lo, hi]``, exact product of CDF differences."""
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        p = 1.0
        for j in range(self.dim):
            if hi[j] < lo[j]:
                return 0.0
            p *= float(self.cdf(hi[j], j) - self.cdf(lo[j], j)) if self.scale[j] > 0 else float(
                lo[j] <= 0.0 <= hi[j])
        return p

    def partition(self, M: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Split the support into ``M`` equal cells per noisy dimension.

        Returns (lo, hi, weight) arrays; weights are exact cell masses summing to 1.
        Deterministic dimensions contribute a single degenerate cell at 0.
        """
        axes_lo, axes_hi, axes_w = [], [], []
        for j, c in enumerate(self.scale):
            if c > 0:
                edges = np.linspace(-c, c, M + 1)
                cdf = self.cdf(edges, j)
                axes_lo.append(edges[:-1])
                axes_hi.append(edges[1:])
                axes_w.append(np.diff(cdf))
            else:
                axes_lo.append(np.zeros(1))
                axes_hi.append(np.zeros(1))
                axes_w.append(np.ones(1))
        return _product_cells(axes_lo, axes_hi, axes_w)


@dataclass(frozen=True)
class DiscreteNoise:
    """Finitely supported noise: ``values[k]`` drawn with probability ``probs[k]``."""

    values: tuple[tuple[float, ...], ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(tuple(float(v) for v in row) for row in self.values)
        probs = tuple(float(p) for p in self.probs)
        if len(vals) != len(probs) or not vals:
            raise ValueError("values and probs must be nonempty and aligned")
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError("probs must be a probability vector")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "probs", probs)

    @property
    def dim(self) -> int:
        return len(self.values[0])

    @property
    def support(self) -> tuple[np.ndarray, np.ndarray]:
        v = np.array(self.values)
        return v.min(axis=0), v.max(axis=0)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.choice(len(self.probs), size=n, p=np.array(self.probs))
        return np.array(self.values)[idx]

    def mass(self, lo, hi) -> float:
        v = np.array(self.values)
        inside = np.all((v >= np.asarray(lo)) & (v <= np.asarray(hi)), axis=1)
        return float(np.array(self.probs)[inside].sum())

    def partition(self, M: int):
        v = np.array(self.values)
        return v.copy(), v.copy(), np.array(self.probs)


def _product_cells(axes_lo, axes_hi, axes_w):
    grids = np.meshgrid(*[np.arange(len(w)) for w in axes_w], indexing="ij")
    idx = [g.reshape(-1) for g in grids]
    lo = np.stack([a[i] for a, i in zip(axes_lo, idx)], axis=1)
    hi = np.stack([a[i] for a, i in zip(axes_hi, idx)], axis=1)
    w = np.prod(np.stack([a[i] for a, i in zip(axes_w, idx)], axis=1), axis=1)
    return lo, hi, w


def triangular_mass(noise: TriangularNoise, lo, hi) -> float:
    return noise.mass(lo, hi)


# ---------------------------------------------------------------------------
# Systems
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StochasticSystem:
    """Diagonal clamped dynamics ``x' = clamp_X(a*x + b*clip_U(u) + g*w)``.

    ``a``, ``b`` and ``g`` are per-dimension gains; actions and noise share the
    state dimension. ``lipschitz_f`` is with respect to the L1 norm on the
    stacked input (x, u, w); ``max_step`` bounds ``||f(x, u, w) - x||_1``.
    """

    state_space: Box
    action_space: Box
    noise: TriangularNoise | DiscreteNoise
    a: tuple[float, ...]
    b: tuple[float, ...]
    g: tuple[float, ...]
    lipschitz_f: float = field(default=-1.0)
    max_step: float = field(default=-1.0)

    def __post_init__(self):
        d = self.state_space.dim
        for name in ("a", "b", "g"):
            val = tuple(float(v) for v in getattr(self, name))
            if len(val) != d:
                raise DimensionError(f"gain {name} has {len(val)} entries, state dim is {d}")
            object.__setattr__(self, name, val)
        if self.action_space.dim != d or self.noise.dim != d:
            raise DimensionError("action and noise dimensions must equal the state dimension")
        if self.lipschitz_f < 0:
            object.__setattr__(self, "lipschitz_f", self.analytic_lipschitz())
        if self.max_step < 0:
            object.__setattr__(self, "max_step", self.analytic_max_step())
        if self.max_step <= 0:
            raise ValueError("max step must be positive")

    @property
    def dim(self) -> int:
        return self.state_space.dim

    def analytic_lipschitz(self) -> float:
        return float(max(np.max(np.abs(self.a)), np.max(np.abs(self.b)), np.max(np.abs(self.g))))

    def analytic_max_step(self) -> float:
        lo, hi = np.array(self.state_space.lo), np.array(self.state_space.hi)
        xmag = np.maximum(np.abs(lo), np.abs(hi))
        umag = np.maximum(np.abs(self.action_space.lo), np.abs(self.action_space.hi))
        wlo, whi = self.noise.support
        wmag = np.maximum(np.abs(wlo), np.abs(whi))
        a, b, g = (np.array(v) for v in (self.a, self.b, self.g))
        per_dim = np.abs(a - 1.0) * xmag + np.abs(b) * umag + np.abs(g) * wmag
        # the clamp only moves points toward X, so it never lengthens a step
        width = hi - lo
        return float(np.minimum(per_dim, width).sum())

    def clip_action(self, u) -> np.ndarray:
        return np.clip(u, self.action_space.lo, self.action_space.hi)

    def step(self, x, u, w) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        z = (np.asarray(self.a) * x + np.asarray(self.b) * self.clip_action(u)
             + np.asarray(self.g) * np.asarray(w, dtype=float))
        return np.clip(z, self.state_space.lo, self.state_space.hi)

    def step_noise_box(self, x, u, wlo, whi) -> tuple[np.ndarray, np.ndarray]:
        """Exact image box of ``[wlo, whi]`` under ``w -> f(x, u, w)``.

        Works on batches: ``x, u`` of shape (n, d), noise boxes of shape (m, d);
        returns (n, m, d) arrays.
        """
        base = np.asarray(self.a) * x + np.asarray(self.b) * self.clip_action(u)
        g = np.asarray(self.g)
        e1 = g * wlo
        e2 = g * whi
        lo = base[:, None, :] + np.minimum(e1, e2)[None]
        hi = base[:, None, :] + np.maximum(e1, e2)[None]
        slo, shi = self.state_space.lo, self.state_space.hi
        return np.clip(lo, slo, shi), np.clip(hi, slo, shi)

    def with_overrides(self, **kw) -> "StochasticSystem":
        fields = dict(state_space=self.state_space, action_space=self.action_space,
                      noise=self.noise, a=self.a, b=self.b, g=self.g)
        fields.update(kw)
        return StochasticSystem(**fields)

    def describe(self) -> dict:
        noise = ({"kind": "triangular", "scale": list(self.noise.scale)}
                 if isinstance(self.noise, TriangularNoise)
                 else {"kind": "discrete", "values": [list(v) for v in self.noise.values],
                       "probs": list(self.noise.probs)})
        return {
            "state_space": [list(self.state_space.lo), list(self.state_space.hi)],
            "action_space": [list(self.action_space.lo), list(self.action_space.hi)],
            "noise": noise,
            "a": list(self.a), "b": list(self.b), "g": list(self.g),
            "lipschitz_f": self.lipschitz_f, "max_step": self.max_step,
        }


@dataclass(frozen=True)
class ReachAvoidTask:
    initial: Region
    target: Region
    unsafe: Region

    def __post_init__(self):
        if not (self.initial.dim == self.target.dim == self.unsafe.dim):
            raise DimensionError("task regions disagree on dimension")
        if self.initial.is_empty:
            raise InvalidTaskError("initial region is empty")
        if self.initial.intersects(self.unsafe):
            raise InvalidTaskError("initial region meets the unsafe region")

    def check_within(self, space: Box):
        full = Region.of(space)
        if not (self.initial.issubset(full) and self.target.issubset(full)):
            raise InvalidTaskError("initial and target regions must lie in the state space")

    @property
    def trivial(self) -> bool:
        return self.initial.issubset(self.target)


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

Policy = Callable[[np.ndarray], np.ndarray]


def _policy_fn(policy):
    """Accept plain callables, objects with ``act`` and optional ``reset``."""
    if hasattr(policy, "act"):
        return policy.act, getattr(policy, "reset", None)
    return policy, None


def simulate(system: StochasticSystem, policy, x0, horizon: int, rng: np.random.Generator):
    """Roll out a batch from ``x0`` (n, d); returns states (T+1, n, d) and actions (T, n, d)."""
    act, reset = _policy_fn(policy)
    x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    n = x.shape[0]
    if reset is not None:
        reset(n)
    xs = np.empty((horizon + 1, n, system.dim))
    us = np.empty((horizon, n, system.dim))
    xs[0] = x
    for t in range(horizon):
        u = system.clip_action(np.asarray(act(x), dtype=float).reshape(n, -1))
        w = system.noise.sample(rng, n)
        x = system.step(x, u, w)
        us[t] = u
        xs[t + 1] = x
    return xs, us


@dataclass(frozen=True)
class McResult:
    estimate: float
    lower: float
    upper: float
    successes: int
    episodes: int
    alpha: float

    def consistent_with_bound(self, bound: float) -> bool:
        """A certified lower bound must not exceed the upper confidence limit."""
        return bound <= self.upper


def clopper_pearson(k: int, n: int, alpha: float) -> tuple[float, float]:
    lo = 0.0 if k == 0 else float(stats.beta.ppf(alpha / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - alpha / 2, k + 1, n - k))
    return lo, hi


def mc_reach_avoid(system: StochasticSystem, policy, task: ReachAvoidTask, horizon: int,
                   episodes: int, seed: int, alpha: float = 0.01,
                   initial_states: np.ndarray | None = None) -> McResult:
    """Fraction of episodes entering the target before touching the unsafe set.

    Episodes with neither event within ``horizon`` count as failures. Episodes
    run in blocks whose generators are spawned from ``seed``, so the result does
    not depend on how blocks are scheduled, and a longer horizon only extends
    each trajectory.
    """
    if horizon < 1 or episodes < 1:
        raise ValueError("horizon and episodes must be at least 1")
    blocks = np.random.SeedSequence(seed).spawn((episodes + BLOCK - 1) // BLOCK)
    ok = 0
    done = 0
    for b, ss in enumerate(blocks):
        n = min(BLOCK, episodes - done)
        rng = np.random.default_rng(ss)
        if initial_states is not None:
            x0 = np.asarray(initial_states, dtype=float)[done:done + n]
        else:
            x0 = task.initial.sample(rng, n)
        xs, _ = simulate(system, policy, x0, horizon, rng)
        flat = xs.reshape(-1, system.dim)
        hit = task.target.contains_many(flat).reshape(horizon + 1, n)
        bad = task.unsafe.contains_many(flat).reshape(horizon + 1, n)
        ok += int(_kernels.reach_avoid_outcome(hit, bad).sum())
        done += n
    lo, hi = clopper_pearson(ok, episodes, alpha)
    return McResult(ok / episodes, lo, hi, ok, episodes, alpha)


def trajectory_csv(xs: np.ndarray, us: np.ndarray, episode: int = 0) -> str:
    """CSV dump of one episode: t, x_1..x_d, u_1..u_d (actions blank at the last step)."""
    d = xs.shape[-1]
    head = ["t"] + [f"x{i + 1}" for i in range(d)] + [f"u{i + 1}" for i in range(d)]
    rows = [",".join(head)]
    T = us.shape[0]
    for t in range(T + 1):
        xv = [repr(float(v)) for v in xs[t, episode]]
        uv = [repr(float(v)) for v in us[t, episode]] if t < T else [""] * d
        rows.append(",".join([str(t)] + xv + uv))
    return "\n".join(rows) + "\n"
