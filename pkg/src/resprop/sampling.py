"""Seeded sampling of weights, inputs and injected output deltas.

Every trial draws from its own counter-derived streams, so trials can be
evaluated in any order or on any number of workers without changing a bit
of the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Distribution, NetworkConfig

# stream ids within a trial
_WEIGHTS, _INPUTS, _DELTAS, _AUX = 0, 1, 2, 3


@dataclass(frozen=True)
class SeedPlan:
    master_seed: int = 0
    trial_index: int = 0

    def rng(self, stream: int, *extra: int) -> np.random.Generator:
        seq = np.random.SeedSequence(
            self.master_seed, spawn_key=(self.trial_index, stream, *extra)
        )
        return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class NetworkWeights:
    """W^1..W^L, each an ``n x n`` matrix acting as ``u = W z``."""

    matrices: tuple

    def __len__(self):
        return len(self.matrices)

    def __getitem__(self, i):
        return self.matrices[i]

    @classmethod
    def zeros(cls, depth, width):
        return cls(tuple(np.zeros((width, width)) for _ in range(depth)))

    @classmethod
    def from_arrays(cls, arrays):
        return cls(tuple(np.array(a, dtype=float) for a in arrays))


def draw_symmetric(rng, distribution, variance, size):
    """Zero-mean symmetric draws with the given variance."""
    distribution = Distribution(distribution)
    if variance == 0:
        return np.zeros(size)
    scale = math.sqrt(variance)
    if distribution is Distribution.GAUSSIAN:
        return rng.normal(0.0, scale, size)
    if distribution is Distribution.UNIFORM:
        half_width = math.sqrt(3.0) * scale
        return rng.uniform(-half_width, half_width, size)
    signs = rng.integers(0, 2, size) * 2 - 1
    return signs * scale


def sample_layer(cfg: NetworkConfig, plan: SeedPlan, layer: int) -> np.ndarray:
    """Weight matrix of block ``layer`` (1-based)."""
    rng = plan.rng(_WEIGHTS, layer)
    n = cfg.width
    return draw_symmetric(rng, cfg.init.distribution, cfg.weight_variance, (n, n))


def sample_weights(cfg: NetworkConfig, plan: SeedPlan) -> NetworkWeights:
    return NetworkWeights(
        tuple(sample_layer(cfg, plan, layer) for layer in range(1, cfg.depth + 1))
    )


def sample_inputs(cfg: NetworkConfig, plan: SeedPlan) -> np.ndarray:
    """Gaussian inputs, shape ``(batch_size, width)``."""
    rng = plan.rng(_INPUTS)
    return draw_symmetric(
        rng, Distribution.GAUSSIAN, cfg.input_variance, (cfg.batch_size, cfg.width)
    )


def sample_output_delta(cfg: NetworkConfig, plan: SeedPlan) -> np.ndarray:
    """Zero-mean Gaussian dE/dz^L per sample, shape ``(batch_size, width)``."""
    rng = plan.rng(_DELTAS)
    return draw_symmetric(
        rng,
        Distribution.GAUSSIAN,
        cfg.output_delta_variance,
        (cfg.batch_size, cfg.width),
    )


def aux_rng(plan: SeedPlan, *extra: int) -> np.random.Generator:
    """Spare stream for callers that need more randomness per trial (datasets...)."""
    return plan.rng(_AUX, *extra)
