"""Seeded Monte-Carlo trials, mergeable per-layer statistics, and comparison
against analytic predictions."""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import analytic
from .analytic import Kind, PredictionTable
from .model import Activation, BlockKind, ConfigError, ContractError, DegenerateBatchError, NetworkConfig
from .propagation import run
from .sampling import SeedPlan, sample_inputs, sample_output_delta, sample_weights

QUANTITIES = ("z", "u", "delta_z", "delta", "grad", "grad_sample", "active", "sigma2")

CSV_COLUMNS = ("layer", "quantity", "empirical", "stderr", "predicted", "kind", "rel_err", "pass")


@dataclass
class Moments:
    """Per-layer count, mean and sum of squared deviations (Chan/Welford)."""

    count: np.ndarray
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def from_values(cls, values):
        """``values`` has the layer on axis 0; everything else is pooled."""
        values = np.asarray(values, dtype=float)
        flat = values.reshape(values.shape[0], -1)
        mean = flat.mean(axis=1)
        dev = flat - mean[:, None]
        return cls(np.full(len(flat), flat.shape[1], dtype=float), mean, np.einsum("ij,ij->i", dev, dev))

    @classmethod
    def from_sums(cls, count, s1, s2):
        count = np.asarray(count, dtype=float)
        mean = np.asarray(s1, dtype=float) / count
        m2 = np.maximum(np.asarray(s2, dtype=float) - mean * np.asarray(s1, dtype=float), 0.0)
        return cls(count, mean, m2)

    def merge(self, other: "Moments") -> "Moments":
        n = self.count + other.count
        delta = other.mean - self.mean
        with np.errstate(invalid="ignore", divide="ignore"):
            w = np.where(n > 0, other.count / n, 0.0)
        mean = self.mean + delta * w
        m2 = self.m2 + other.m2 + delta * delta * self.count * w
        return Moments(n, mean, m2)

    def variance(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.m2 / (self.count - 1)


@dataclass
class LayerStats:
    """Pooled moments per quantity plus trial-level moments of the per-trial
    mean and variance (used for honest standard errors, since samples within a
    trial share weights)."""

    depth: int
    pooled: Dict[str, Moments]
    trial_mean: Dict[str, Moments]
    trial_var: Dict[str, Moments]
    trials: List[int] = field(default_factory=list)

    def merge(self, other: "LayerStats") -> "LayerStats":
        if other.depth != self.depth:
            raise ContractError("cannot merge statistics of different depths")
        return LayerStats(
            self.depth,
            {q: self.pooled[q].merge(other.pooled[q]) for q in self.pooled},
            {q: self.trial_mean[q].merge(other.trial_mean[q]) for q in self.pooled},
            {q: self.trial_var[q].merge(other.trial_var[q]) for q in self.pooled},
            self.trials + other.trials,
        )

    @property
    def n_trials(self):
        return len(self.trials)

    def mean(self, q):
        return self.pooled[q].mean

    def variance(self, q):
        return self.pooled[q].variance()

    def count(self, q):
        return self.pooled[q].count

    def stderr_mean(self, q):
        pooled = np.sqrt(self.variance(q) / self.count(q))
        return np.maximum(pooled, self._between(self.trial_mean[q]))

    def stderr_variance(self, q):
        var = self.variance(q)
        normal = var * np.sqrt(2.0 / (self.count(q) - 1))
        return np.maximum(normal, self._between(self.trial_var[q]))

    def _between(self, m: Moments):
        T = self.n_trials
        if T < 2:
            return np.zeros(self.depth)
        return np.sqrt(m.variance() / T)


def _grad_inputs(cfg, trace):
    if cfg.block is BlockKind.PLAIN:
        return trace.z[:-1]
    if cfg.block is BlockKind.BN_PRE_ADD:
        return trace.z_hat
    return [cfg.activation(zh) for zh in trace.z_hat]


def _active(cfg, trace):
    f = cfg.activation
    if cfg.block is BlockKind.BN_PRE_ACT:
        return [f.derivative(zh) for zh in trace.z_hat]
    return [f.derivative(u) for u in trace.u]


def trial_stats(cfg: NetworkConfig, plan: SeedPlan) -> LayerStats:
    """Sample one network and minibatch, propagate, and summarize every layer."""
    W = sample_weights(cfg, plan)
    X = sample_inputs(cfg, plan)
    D = sample_output_delta(cfg, plan)
    try:
        trace = run(cfg, W, X, D)
    except DegenerateBatchError as err:
        err.trial = plan.trial_index
        raise

    N = X.shape[0]
    n = cfg.width
    values = {
        "z": np.stack(trace.z[1:]),
        "u": np.stack(trace.u),
        "delta_z": np.stack(trace.delta_z),
        "delta": np.stack(trace.delta),
        "grad": np.stack(trace.grad),
        "active": np.stack(_active(cfg, trace)),
        "sigma2": np.stack([z.var(axis=0) for z in trace.z[1:]]),
    }
    pooled = {q: Moments.from_values(v) for q, v in values.items()}

    # per-sample outer products delta_s (x) input_s, summarized without forming them
    inputs = np.stack(_grad_inputs(cfg, trace))
    delta = values["delta"]
    s1 = (delta.sum(axis=2) * inputs.sum(axis=2)).sum(axis=1)
    s2 = (np.einsum("lsj,lsj->ls", delta, delta) * np.einsum("lsk,lsk->ls", inputs, inputs)).sum(axis=1)
    pooled["grad_sample"] = Moments.from_sums(np.full(cfg.depth, float(N * n * n)), s1, s2)

    ones = np.ones(cfg.depth)
    zeros = np.zeros(cfg.depth)
    trial_mean = {q: Moments(ones, m.mean.copy(), zeros.copy()) for q, m in pooled.items()}
    trial_var = {q: Moments(ones, m.variance(), zeros.copy()) for q, m in pooled.items()}
    return LayerStats(cfg.depth, pooled, trial_mean, trial_var, [plan.trial_index])


def default_workers() -> int:
    value = os.environ.get("RESPROP_WORKERS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            raise ConfigError(f"RESPROP_WORKERS must be an integer, got {value!r}") from None
    return 1


def run_experiment(
    cfg: NetworkConfig,
    trials: int,
    master_seed: int = 0,
    workers: Optional[int] = None,
) -> LayerStats:
    """Run ``trials`` independent trials and merge their statistics in trial order.

    The result is bitwise identical for any ``workers`` value.
    """
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    workers = default_workers() if workers is None else workers
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    plans = [SeedPlan(master_seed, t) for t in range(trials)]
    if workers == 1:
        results = map(lambda p: trial_stats(cfg, p), plans)
        return _reduce(results)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return _reduce(pool.map(lambda p: trial_stats(cfg, p), plans))


def _reduce(results):
    acc = None
    for stats in results:
        acc = stats if acc is None else acc.merge(stats)
    return acc


# -- comparison -----------------------------------------------------------------


@dataclass(frozen=True)
class ToleranceConfig:
    exact_rel: float = 0.05
    z_crit: float = 4.0
    bn_rel: float = 0.10
    approx_rel: float = 0.15


@dataclass(frozen=True)
class ComparisonRow:
    layer: int
    quantity: str
    empirical: float
    stderr: float
    predicted: float
    kind: Kind
    rel_err: float
    passed: bool

    def as_csv(self):
        return [
            str(self.layer), self.quantity, repr(self.empirical), repr(self.stderr),
            repr(self.predicted), self.kind.value, repr(self.rel_err), "1" if self.passed else "0",
        ]


@dataclass
class ComparisonReport:
    rows: List[ComparisonRow]

    @property
    def ok(self) -> bool:
        """True when every Exact and LowerBound row passes."""
        return all(r.passed for r in self.rows if r.kind is not Kind.APPROXIMATION)

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def failures(self):
        return [r for r in self.rows if not r.passed]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow(r.as_csv())
        return buf.getvalue()

    def summary(self) -> dict:
        by_kind = {}
        for r in self.rows:
            entry = by_kind.setdefault(r.kind.value, {"rows": 0, "failed": 0})
            entry["rows"] += 1
            entry["failed"] += int(not r.passed)
        return {"ok": self.ok, "all_passed": self.all_passed, "by_kind": by_kind}


def passes(kind: Kind, empirical, predicted, stderr, tol_rel, z_crit) -> bool:
    if not np.isfinite(empirical):
        return False
    if kind is Kind.EXACT:
        return abs(empirical - predicted) <= max(tol_rel * abs(predicted), z_crit * stderr)
    if kind is Kind.LOWER_BOUND:
        return empirical >= predicted * (1.0 - tol_rel)
    return abs(empirical - predicted) <= tol_rel * abs(predicted)


def _mapping(block):
    # (stats quantity, table column, statistic)
    z_source = ("z", "variance") if block is BlockKind.PLAIN else ("sigma2", "mean")
    return [
        (z_source[0], "var_z", z_source[1]),
        ("delta_z", "var_delta_z", "variance"),
        ("delta", "var_delta", "variance"),
        ("grad_sample", "var_grad", "variance"),
    ]


def compare(stats: LayerStats, table: PredictionTable, tol: ToleranceConfig = ToleranceConfig()) -> ComparisonReport:
    if stats.depth != table.depth:
        raise ContractError(f"statistics have {stats.depth} layers, predictions {table.depth}")
    bn = table.cfg.block.uses_batchnorm
    rows = []
    for quantity, column, statistic in _mapping(table.cfg.block):
        pred = getattr(table, column)
        if statistic == "mean":
            emp, se = stats.mean(quantity), stats.stderr_mean(quantity)
        else:
            emp, se = stats.variance(quantity), stats.stderr_variance(quantity)
        if pred.kind is Kind.APPROXIMATION:
            tol_rel = tol.bn_rel if (bn and column != "var_grad") else tol.approx_rel
        else:
            tol_rel = tol.exact_rel
        for i in range(stats.depth):
            p = float(pred.value[i])
            e = float(emp[i])
            rel = (e - p) / p if p != 0 else math.nan
            rows.append(ComparisonRow(
                i + 1, quantity, e, float(se[i]), p, pred.kind, rel,
                bool(passes(pred.kind, e, p, float(se[i]), tol_rel, tol.z_crit)),
            ))
    return ComparisonReport(rows)


def mean_checks(stats: LayerStats, cfg: NetworkConfig, z_crit: float = 4.0) -> ComparisonReport:
    """Zero-mean chains and the ReLU Bernoulli(1/2) derivative, within z_crit stderr."""
    checks = [("delta_z", 0.0), ("delta", 0.0)]
    if cfg.activation is Activation.IDENTITY:
        checks.insert(0, ("z", 0.0))
    elif cfg.block is not BlockKind.BN_PRE_ACT:
        # u is symmetric, so f'(u) = 1 with probability 1/2
        checks.append(("active", 0.5))
    rows = []
    for quantity, target in checks:
        emp = stats.mean(quantity)
        se = stats.stderr_mean(quantity)
        for i in range(stats.depth):
            e, s = float(emp[i]), float(se[i])
            rows.append(ComparisonRow(
                i + 1, f"mean_{quantity}", e, s, target, Kind.EXACT,
                (e - target) / target if target else math.nan,
                abs(e - target) <= z_crit * s,
            ))
    return ComparisonReport(rows)


# -- finite batch convergence ------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceRow:
    batch_size: int
    ratio: float
    stderr: float
    reference: float

    @property
    def deviation(self):
        return abs(self.ratio - self.reference)


def delta_ratio(stats: LayerStats, layer: int = 1):
    """Var[delta_z^layer] / Var[delta_z^L] with a delta-method standard error."""
    var = stats.variance("delta_z")
    se = stats.stderr_variance("delta_z")
    top, bottom = var[layer - 1], var[-1]
    ratio = top / bottom
    return ratio, ratio * math.hypot(se[layer - 1] / top, se[-1] / bottom)


def bn_finite_N_convergence(
    cfg: NetworkConfig,
    batch_sizes: Sequence[int],
    trials: int,
    master_seed: int = 0,
    workers: Optional[int] = None,
    layer: int = 1,
) -> List[ConvergenceRow]:
    if not cfg.block.uses_batchnorm:
        raise ContractError("finite-N convergence needs a batch-normalized block kind")
    rows = []
    reference = cfg.depth / layer
    for N in batch_sizes:
        if N < 2:
            raise ConfigError(f"batch sizes must be >= 2, got {N}")
        stats = run_experiment(cfg.replace(batch_size=int(N)), trials, master_seed, workers)
        ratio, se = delta_ratio(stats, layer)
        rows.append(ConvergenceRow(int(N), float(ratio), float(se), reference))
    return rows


def deviations_shrink(rows: Sequence[ConvergenceRow], k: float = 2.0) -> bool:
    """Each deviation from the N -> infinity value is no larger than the previous
    one, up to ``k`` combined standard errors."""
    for prev, cur in zip(rows, rows[1:]):
        if cur.deviation > prev.deviation + k * math.hypot(prev.stderr, cur.stderr):
            return False
    return True


def convergence_csv(rows: Sequence[ConvergenceRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["batch_size", "ratio", "stderr", "reference", "deviation"])
    for r in rows:
        writer.writerow([r.batch_size, repr(r.ratio), repr(r.stderr), repr(r.reference), repr(r.deviation)])
    return buf.getvalue()


def experiment_report(cfg, trials, master_seed=0, workers=None, tol=ToleranceConfig()):
    """run_experiment + compare against :func:`analytic.predict`."""
    stats = run_experiment(cfg, trials, master_seed, workers)
    return stats, compare(stats, analytic.predict(cfg), tol)
