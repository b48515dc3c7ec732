from __future__ import annotations

from dataclasses import dataclass, fields, replace


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of the learner-verifier loop. Every field is overridable from the config file."""

    lr: float = 3e-3
    batch_size: int = 256
    noise_samples: int = 16          # noise draws per decrease term
    lipschitz_threshold: float = 8.0  # rho for the certificate network
    policy_lipschitz_threshold: float = 4.0
    lipschitz_weight: float = 0.05    # t
    max_iters: int = 12               # learner-verifier rounds per lambda
    epochs_per_iter: int = 300        # gradient steps between verifier calls
    mesh: float = 0.01                # tau
    noise_resolution: int = 8         # M cells per noisy dimension
    seed: int = 0
    timeout: float = 1800.0           # seconds, whole edge budget
    hidden: tuple[int, ...] = (64, 64)
    policy_hidden: tuple[int, ...] = (64, 64)
    init_margin: float = 0.05
    unsafe_margin: float = 0.05
    grid_per_dim: int = 40            # initial discretization of the counterexample sets
    pretrain_iters: int = 150
    pretrain_batch: int = 64
    pretrain_horizon: int = 60
    pretrain_lr: float = 1e-2
    pretrain_floor: float = 0.6
    lambda_decay: float = 0.7
    min_lambda_steps: int = 5
    precision: float = 0.02
    max_probes: int = 8
    p_lo: float = 0.0
    p_hi: float = 0.999
    grid_budget: float = 5e7          # max grid vertices the verifier will consider
    train_policy: bool = True
    lipschitz_mode: str = "local"     # "local" per-vertex constants or "global" product bound
    dec_margin: float = 0.01          # extra slack on the sampled decrease term
    learner: str = "hinge"            # "hinge" (LP certificate), "gradient" or "both"
    hinge_spacing: float = 0.02       # offset spacing of the hinge dictionary
    policy_repairs: int = 3           # policy repair rounds per lambda when the LP fails
    repair_steps: int = 300

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (bool, str)) or f.name in ("p_lo", "seed", "policy_repairs"):
                continue
            if isinstance(v, tuple):
                # an empty policy_hidden gives a single tanh layer
                if (not v and f.name != "policy_hidden") or any(int(h) <= 0 for h in v):
                    raise ValueError(f"{f.name} must list positive widths")
            elif not v > 0:
                raise ValueError(f"{f.name} must be positive")
        if not 0 <= self.p_lo < self.p_hi < 1:
            raise ValueError("need 0 <= p_lo < p_hi < 1")
        if self.lipschitz_mode not in ("local", "global"):
            raise ValueError("lipschitz_mode must be 'local' or 'global'")
        if self.learner not in ("hinge", "gradient", "both"):
            raise ValueError("learner must be 'hinge', 'gradient' or 'both'")
        if self.policy_repairs < 0:
            raise ValueError("policy_repairs must be nonnegative")
        if not 0 < self.lambda_decay < 1:
            raise ValueError("lambda_decay must lie in (0, 1)")

    def override(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    @classmethod
    def from_strings(cls, items: dict[str, str]) -> "TrainConfig":
        kinds = {f.name: f for f in fields(cls)}
        base = cls()
        kw = {}
        for k, raw in items.items():
            if k not in kinds:
                raise KeyError(f"unknown training option {k!r}")
            cur = getattr(base, k)
            if isinstance(cur, bool):
                kw[k] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(cur, int):
                kw[k] = int(raw)
            elif isinstance(cur, float):
                kw[k] = float(raw)
            elif isinstance(cur, str):
                kw[k] = raw.strip()
            elif isinstance(cur, tuple):
                kw[k] = tuple(int(x) for x in raw.replace(",", " ").split())
        return cls(**kw)
