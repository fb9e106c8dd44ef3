"""Short SGD runs on a synthetic two-class problem.

The readout is the mean of the output units, trained with squared error
against +-1 targets. Runs exist to compare initialization schemes at the
start of training: step-0 gradient magnitudes per layer, divergence, and
loss plateaus.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.stats import spearmanr

from .model import ConfigError, DegenerateBatchError, NetworkConfig
from .propagation import backward, forward
from .sampling import NetworkWeights, SeedPlan, aux_rng, sample_weights

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ("repeat", "step", "loss", "grad_norm_min", "grad_norm_max", "grad_norm_mean", "diverged")


@dataclass(frozen=True)
class DatasetConfig:
    samples: int = 512
    separation: float = 2.0
    classes: int = 2

    def __post_init__(self):
        if self.classes != 2:
            raise ConfigError("only binary datasets are supported")
        if self.samples < 2:
            raise ConfigError("dataset needs at least 2 samples")
        if not self.separation >= 0:
            raise ConfigError("separation must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    net: NetworkConfig
    steps: int = 20
    learning_rate: float = 0.05
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    repeats: int = 1
    plateau_window: int = 20
    plateau_threshold: float = 0.01

    def __post_init__(self):
        if self.steps < 1 or self.repeats < 1:
            raise ConfigError("steps and repeats must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class RunResult:
    losses: List[float]
    grad_norms: List[np.ndarray]
    final_accuracy: float
    diverged: bool = False
    divergence_step: Optional[int] = None
    divergence_layer: Optional[int] = None

    @property
    def step0_grad_norms(self) -> np.ndarray:
        return self.grad_norms[0]

    def plateaued(self, window: int, threshold: float) -> bool:
        """Some window of ``window`` steps lowered the loss by less than ``threshold`` (relative)."""
        losses = np.asarray(self.losses)
        if self.diverged or len(losses) <= window:
            return False
        start, end = losses[:-window], losses[window:]
        return bool(np.any((start - end) < threshold * np.abs(start)))


@dataclass
class TrainResult:
    config: TrainConfig
    runs: List[RunResult]

    def divergences(self) -> int:
        return sum(r.diverged for r in self.runs)

    def plateaus(self) -> int:
        return sum(r.plateaued(self.config.plateau_window, self.config.plateau_threshold) for r in self.runs)

    def step0_mean_grad_norm(self) -> float:
        return float(np.mean([np.mean(r.step0_grad_norms) for r in self.runs]))

    def accuracy_std(self) -> float:
        return float(np.nanstd([r.final_accuracy for r in self.runs]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for i, run in enumerate(self.runs):
            for step, loss in enumerate(run.losses):
                norms = run.grad_norms[step] if step < len(run.grad_norms) else None
                stats = ("", "", "") if norms is None else (
                    repr(float(norms.min())), repr(float(norms.max())), repr(float(norms.mean())))
                flag = int(run.diverged and run.divergence_step is not None and step >= run.divergence_step)
                writer.writerow([i, step, repr(float(loss)), *stats, flag])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "repeats": len(self.runs),
            "divergences": self.divergences(),
            "plateaus": self.plateaus(),
            "step0_mean_grad_norm": self.step0_mean_grad_norm(),
            "final_accuracy": [r.final_accuracy for r in self.runs],
            "divergence_layers": [r.divergence_layer for r in self.runs],
        }


def make_dataset(cfg: DatasetConfig, width: int, rng: np.random.Generator):
    """Two unit-covariance Gaussians whose means sit +-separation/2 along a random direction."""
    direction = rng.normal(size=width)
    direction /= np.linalg.norm(direction)
    targets = np.where(rng.random(cfg.samples) < 0.5, -1.0, 1.0)
    X = rng.normal(size=(cfg.samples, width)) + np.outer(targets, direction) * (cfg.separation / 2)
    return X, targets


def _first_bad_layer(trace):
    for i, z in enumerate(trace.z[1:], start=1):
        if not np.all(np.isfinite(z)):
            return i
    for i, g in enumerate(trace.grad, start=1):
        if not np.all(np.isfinite(g)):
            return i
    return None


def _locate_divergence(cfg, weights, X):
    try:
        return _first_bad_layer(forward(cfg, weights, X))
    except DegenerateBatchError as err:
        return err.layer


def _loss_and_grads(cfg, W, X, t):
    trace = forward(cfg, W, X)
    y = trace.output.mean(axis=1)
    residual = y - t
    loss = float(np.mean(residual * residual))
    delta_out = np.repeat((2.0 * residual / cfg.width)[:, None], cfg.width, axis=1)
    backward(cfg, W, trace, delta_out)
    return loss, trace


def train_once(tc: TrainConfig, seed: int, repeat: int) -> RunResult:
    cfg = tc.net
    X_all, t_all = make_dataset(tc.dataset, cfg.width, aux_rng(SeedPlan(seed, 0), 0))
    plan = SeedPlan(seed, repeat)
    W = [w.copy() for w in sample_weights(cfg, plan)]
    order_rng = aux_rng(plan, 1)
    batch = min(cfg.batch_size, len(t_all))
    losses, norms = [], []
    result = RunResult(losses, norms, math.nan)

    with np.errstate(all="ignore"):
        for step in range(tc.steps + 1):
            weights = NetworkWeights(tuple(W))
            try:
                full_loss = float(np.mean((forward(cfg, weights, X_all).output.mean(axis=1) - t_all) ** 2))
            except DegenerateBatchError:
                full_loss = math.nan
            losses.append(full_loss)
            if not math.isfinite(full_loss):
                result.diverged = True
                result.divergence_step = step
                result.divergence_layer = _locate_divergence(cfg, weights, X_all)
                break
            if step == tc.steps:
                break
            idx = order_rng.choice(len(t_all), size=batch, replace=False)
            try:
                _, trace = _loss_and_grads(cfg, weights, X_all[idx], t_all[idx])
            except DegenerateBatchError:
                result.diverged = True
                result.divergence_step = step
                break
            g = np.array([np.linalg.norm(gl) for gl in trace.grad])
            norms.append(g)
            if not np.all(np.isfinite(g)):
                result.diverged = True
                result.divergence_step = step
                result.divergence_layer = _first_bad_layer(trace)
                break
            for i, gl in enumerate(trace.grad):
                W[i] = W[i] - tc.learning_rate * gl

        if not result.diverged:
            y = forward(cfg, NetworkWeights(tuple(W)), X_all).output.mean(axis=1)
            result.final_accuracy = float(np.mean(np.sign(y) == t_all))
    if result.diverged:
        logger.info("repeat %d diverged at step %s (layer %s)", repeat, result.divergence_step, result.divergence_layer)
    return result


def train(tc: TrainConfig, seed: int = 0, workers: int = 1) -> TrainResult:
    """Run ``tc.repeats`` independent trainings; repeat ``r`` draws weights from trial ``r``."""
    if workers <= 1:
        runs = [train_once(tc, seed, r) for r in range(tc.repeats)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(lambda r: train_once(tc, seed, r), range(tc.repeats)))
    return TrainResult(tc, runs)


def step0_rank_correlation(result: TrainResult, predicted) -> float:
    """Spearman correlation across layers of mean step-0 ||G^l||^2 and ``predicted``."""
    sq = np.mean([r.step0_grad_norms**2 for r in result.runs], axis=0)
    return float(spearmanr(sq, np.asarray(predicted)).statistic)
