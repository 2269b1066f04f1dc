"""Token sampling: greedy, or temperature -> top-k -> top-p."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import SamplingError

GREEDY = "greedy"
STOCHASTIC = "stochastic"


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 0.7
    top_k: int = 20
    top_p: float = 0.8
    seed: int = 0
    mode: str = STOCHASTIC

    def __post_init__(self):
        if self.mode not in (GREEDY, STOCHASTIC):
            raise SamplingError(f"unknown sampling mode {self.mode!r}")
        if not self.temperature > 0:
            raise SamplingError("temperature must be positive")
        if self.top_k < 1:
            raise SamplingError("top_k must be >= 1")
        if not 0 < self.top_p <= 1:
            raise SamplingError("top_p must lie in (0, 1]")


def sample(logits, cfg: SamplerConfig, forbidden: Iterable[int] = (),
           rng: np.random.Generator | None = None) -> int:
    """Draw one token id. Forbidden ids get probability exactly zero."""
    x = np.array(logits, dtype=np.float64)
    banned = list(forbidden)
    if banned:
        x[banned] = -np.inf
    allowed = np.isfinite(x)
    n_allowed = int(allowed.sum())
    if n_allowed == 0:
        raise SamplingError("every token is forbidden or non-finite")
    if cfg.mode == GREEDY:
        return int(np.argmax(x))

    x /= cfg.temperature
    order = np.argsort(-x, kind="stable")[:min(cfg.top_k, n_allowed)]
    z = x[order]
    p = np.exp(z - z[0])
    p /= p.sum()
    cut = min(int(np.searchsorted(np.cumsum(p), cfg.top_p)) + 1, len(p))
    order, p = order[:cut], p[:cut] / p[:cut].sum()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return int(order[rng.choice(len(order), p=p)])
