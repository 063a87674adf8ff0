"""Seedable generation of parameter scenarios.

Each scenario multiplies every nominal parameter by (1 + nu) with nu drawn
independently from a zero-mean Gaussian; the multiplier is clamped below at
a small positive floor so parameters stay strictly positive.  Draws are
fully determined by (seed, stream): distinct streams are statistically
independent, so concurrent consumers never race on generator state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import NOMINAL_PARAMS

# stream-id domains; keep these disjoint so Monte Carlo evaluation scenarios
# are never correlated with the scenarios feeding the clustering buffer
STREAM_EVAL = 0
STREAM_BUFFER = 1
STREAM_CLUSTER = 2


@dataclass(frozen=True)
class SamplerConfig:
    sigma: float = 0.2      # std of the multiplicative perturbation
    seed: int = 0
    floor: float = 0.05     # minimum multiplier, preserves positivity

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not 0 < self.floor < 1:
            raise ValueError("floor must lie in (0, 1)")


def _as_stream_tuple(stream) -> tuple:
    if isinstance(stream, (int, np.integer)):
        return (int(stream),)
    return tuple(int(s) for s in stream)


def rng_for(seed: int, stream) -> np.random.Generator:
    """Deterministic generator for a (seed, stream) pair."""
    return np.random.default_rng(list((int(seed),) + _as_stream_tuple(stream)))


def draw(cfg: SamplerConfig, stream, count: int) -> np.ndarray:
    """Draw ``count`` parameter vectors; returns an array of shape (count, 13)."""
    if count < 1:
        raise ValueError("count must be a positive integer")
    rng = rng_for(cfg.seed, stream)
    mult = 1.0 + cfg.sigma * rng.standard_normal((count, len(NOMINAL_PARAMS)))
    np.maximum(mult, cfg.floor, out=mult)
    return mult * NOMINAL_PARAMS


def derive_seed(*parts: int) -> int:
    """Collapse an integer tuple into a single reproducible 64-bit seed."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])
