"""Learner-verifier loop for single reach-avoid edge tasks."""

from .config import TrainConfig
from .search import RasmResult, SearchResult, max_verified_probability, policy_plus_rasm

__all__ = ["TrainConfig", "RasmResult", "SearchResult", "max_verified_probability", "policy_plus_rasm"]
