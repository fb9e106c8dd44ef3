"""Closed-form variance predictors for the residual network family.

Every predictor returns a :class:`Prediction` holding per-layer values for
l = 1..L together with their natural logarithms, so regimes such as 3^100
that overflow (or nearly overflow) stay usable in log-space.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.special import gammaln

from .model import (
    Activation,
    BlockKind,
    ConfigError,
    ContractError,
    Distribution,
    FloatFormat,
    NetworkConfig,
)


class Kind(str, enum.Enum):
    EXACT = "exact"
    LOWER_BOUND = "lower_bound"
    APPROXIMATION = "approximation"


@dataclass(frozen=True)
class Prediction:
    """Per-layer predicted values, index 0 is layer 1."""

    value: np.ndarray
    log_value: np.ndarray
    kind: Kind
    label: str

    def __len__(self):
        return len(self.log_value)

    @property
    def log10(self):
        return self.log_value / math.log(10.0)

    def at(self, layer: int) -> float:
        return float(self.value[layer - 1])


def _safe_log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def _power_law(prefactor, base, exponents, kind, label):
    """prefactor * base**exponents, evaluated directly and in log-space."""
    exponents = np.asarray(exponents, dtype=float)
    with np.errstate(over="ignore"):
        value = prefactor * np.power(float(base), exponents)
    log_value = _safe_log(prefactor) + exponents * math.log(base)
    return Prediction(np.asarray(value, dtype=float), log_value, kind, label)


def _require(cfg, block=None, activation=None, bn=None):
    if block is not None and cfg.block is not block:
        raise ContractError(f"predictor needs block {block.value!r}, got {cfg.block.value!r}")
    if activation is not None and cfg.activation is not activation:
        raise ContractError(
            f"predictor needs activation {activation.value!r}, got {cfg.activation.value!r}"
        )
    if bn is True and not cfg.block.uses_batchnorm:
        raise ContractError("predictor needs a batch-normalized block kind")
    if bn is False and cfg.block.uses_batchnorm:
        raise ContractError("predictor is for plain blocks; use the bn_* predictors")


def _layers(cfg):
    return np.arange(1, cfg.depth + 1, dtype=float)


# -- plain blocks: forward ----------------------------------------------------


def forward_variance_identity(cfg: NetworkConfig) -> Prediction:
    """Var[z^l] = Var[x] (1 + n Var[w])^l."""
    _require(cfg, block=BlockKind.PLAIN, activation=Activation.IDENTITY)
    gain = 1.0 + cfg.width * cfg.weight_variance
    return _power_law(
        cfg.input_variance, gain, _layers(cfg), Kind.EXACT,
        "Var[z^l] = Var[x] (1 + n Var[w])^l",
    )


def forward_variance_relu_lower_bound(cfg: NetworkConfig) -> Prediction:
    """Var[z^l] >= Var[x] (1 + n Var[w] / 4)^l."""
    _require(cfg, block=BlockKind.PLAIN, activation=Activation.RELU)
    gain = 1.0 + 0.25 * cfg.width * cfg.weight_variance
    return _power_law(
        cfg.input_variance, gain, _layers(cfg), Kind.LOWER_BOUND,
        "Var[z^l] >= Var[x] (1 + n Var[w]/4)^l",
    )


@dataclass(frozen=True)
class ReluMoments:
    mean: float
    second_moment: float
    mean_upper_bound: float


def relu_moments(var_u: float, distribution=Distribution.GAUSSIAN) -> ReluMoments:
    """Moments of max(0, u) for zero-mean symmetric ``u`` with variance ``var_u``.

    E[f(u)^2] = var_u / 2 for any symmetric law. E[f(u)] = E|u| / 2 depends on
    the law; Jensen bounds it by sqrt(var_u) / 2, reached by the two-point law.
    """
    if not var_u >= 0:
        raise ContractError(f"variance must be >= 0, got {var_u!r}")
    distribution = Distribution(distribution)
    sd = math.sqrt(var_u)
    if distribution is Distribution.GAUSSIAN:
        abs_mean = sd * math.sqrt(2.0 / math.pi)
    elif distribution is Distribution.UNIFORM:
        abs_mean = sd * math.sqrt(3.0) / 2.0
    else:
        abs_mean = sd
    return ReluMoments(abs_mean / 2.0, var_u / 2.0, sd / 2.0)


# -- plain blocks: backward ---------------------------------------------------


def backward_delta_z_variance(cfg: NetworkConfig) -> Prediction:
    """Var[dE/dz^l] = Var[delta_z^L] (1 + a n Var[w])^(L-l)."""
    _require(cfg, bn=False)
    gain = 1.0 + cfg.a * cfg.width * cfg.weight_variance
    return _power_law(
        cfg.output_delta_variance, gain, cfg.depth - _layers(cfg), Kind.EXACT,
        f"Var[delta_z^l] = Var[delta_z^L] (1 + {cfg.a:g} n Var[w])^(L-l)",
    )


def backward_delta_variance(cfg: NetworkConfig) -> Prediction:
    """Var[dE/du^l]: the delta_z law times E[f'^2] (1 or 1/2)."""
    _require(cfg, bn=False)
    a = cfg.a
    gain = 1.0 + a * cfg.width * cfg.weight_variance
    if cfg.activation is Activation.IDENTITY:
        label = "Var[delta^l] = Var[delta_z^L] (1 + n Var[w])^(L-l)"
    else:
        label = "Var[delta^l] = Var[delta_z^L] (1 + n Var[w]/2)^(L-l) / 2"
    return _power_law(
        a * cfg.output_delta_variance, gain, cfg.depth - _layers(cfg), Kind.EXACT, label
    )


def gradient_variance_plain(cfg: NetworkConfig) -> Prediction:
    """Per-sample Var[dE/dw^l] for plain blocks.

    ReLU: lower bound Var[delta_z^L] Var[x] (1 + n Var[w]/4)^(L-1) / 4.
    Identity: product of the forward and backward laws,
    Var[delta_z^L] Var[x] (1 + n Var[w])^(L-1), the same at every layer.
    """
    _require(cfg, bn=False)
    nv = cfg.width * cfg.weight_variance
    exponents = np.full(cfg.depth, cfg.depth - 1.0)
    scale = cfg.output_delta_variance * cfg.input_variance
    if cfg.activation is Activation.RELU:
        return _power_law(
            0.25 * scale, 1.0 + 0.25 * nv, exponents, Kind.LOWER_BOUND,
            "Var[dE/dw^l] > Var[delta_z^L] Var[x] (1 + n Var[w]/4)^(L-1) / 4",
        )
    return _power_law(
        scale, 1.0 + nv, exponents, Kind.APPROXIMATION,
        "Var[dE/dw^l] = Var[delta_z^L] Var[x] (1 + n Var[w])^(L-1)",
    )


# -- batch-normalized blocks --------------------------------------------------


def _sigma_coefficient(cfg):
    # fraction of n Var[w] that each block adds to Var[z]
    if cfg.block is BlockKind.BN_PRE_ACT:
        return cfg.a
    return 1.0 if cfg.activation is Activation.IDENTITY else 0.5


def bn_sigma_squared(cfg: NetworkConfig):
    """Batch variance of z^l: ``(full, leading)``.

    full = a l n Var[w] + Var[x], leading = a l n Var[w]. The Var[x] term is
    what the leading form drops; it matters for small l.
    """
    _require(cfg, bn=True)
    a = _sigma_coefficient(cfg)
    leading = a * _layers(cfg) * cfg.width * cfg.weight_variance
    full = leading + cfg.input_variance
    return (
        Prediction(full, _safe_log(full), Kind.APPROXIMATION,
                   f"sigma_l^2 = {a:g} l n Var[w] + Var[x]"),
        Prediction(leading, _safe_log(leading), Kind.APPROXIMATION,
                   f"sigma_l^2 ~ {a:g} l n Var[w]"),
    )


def _delta_coefficient(cfg):
    # a in prod_{k=l}^{L-1} (1 + a/k); the pre-activation variant cancels it
    return 1.0 if cfg.block is BlockKind.BN_PRE_ACT else cfg.a


def telescoped_ratio(a: float, L: int, layers) -> np.ndarray:
    """log of prod_{k=l}^{L-1} (1 + a/k) for each l in ``layers``."""
    layers = np.asarray(layers, dtype=float)
    if a == 1.0:
        return np.log(L / layers)
    return gammaln(L + a) - gammaln(L) - gammaln(layers + a) + gammaln(layers)


def bn_delta_variance(cfg: NetworkConfig, full_form: bool = False) -> Prediction:
    """Var[delta_z^l] = Var[delta_z^L] prod_{k=l}^{L-1} (1 + a/k).

    With a = 1 this is exactly (L/l) Var[delta_z^L]. ``full_form`` keeps the
    Var[x] term of the batch variance in each factor instead.
    """
    _require(cfg, bn=True)
    L = cfg.depth
    layers = _layers(cfg)
    a = _delta_coefficient(cfg)
    if full_form:
        nv = cfg.width * cfg.weight_variance
        k = np.arange(1, L, dtype=float)
        terms = np.log1p(cfg.a * nv / (_sigma_coefficient(cfg) * k * nv + cfg.input_variance))
        log_ratio = np.concatenate([np.cumsum(terms[::-1])[::-1], [0.0]])
        label = "Var[delta_z^l] = Var[delta_z^L] prod_k (1 + a n Var[w] / sigma_k^2)"
    else:
        log_ratio = telescoped_ratio(a, L, layers)
        label = (
            "Var[delta_z^l] = (L/l) Var[delta_z^L]" if a == 1.0
            else f"Var[delta_z^l] = Var[delta_z^L] prod_k (1 + {a:g}/k)"
        )
    log_value = _safe_log(cfg.output_delta_variance) + log_ratio
    if a == 1.0 and not full_form:
        value = cfg.output_delta_variance * (L / layers)
    else:
        value = cfg.output_delta_variance * np.exp(log_ratio)
    return Prediction(value, log_value, Kind.APPROXIMATION, label)


def bn_gradient_variance(cfg: NetworkConfig) -> Prediction:
    """Per-sample Var[dE/dw^l]: (L/l) Var[delta_z^L] before the add, a (L/l) before activation."""
    _require(cfg, bn=True)
    delta_z = bn_delta_variance(cfg)
    a = cfg.a
    if cfg.block is BlockKind.BN_PRE_ACT:
        label = f"Var[dE/dw^l] ~ {a:g} (L/l) Var[delta_z^L]"
    else:
        # delta = f'(u) delta_z, multiplied by a unit-variance z_hat
        label = (
            "Var[dE/dw^l] = (L/l) Var[delta_z^L]" if a == 1.0
            else f"Var[dE/dw^l] ~ {a:g} prod_k (1 + {a:g}/k) Var[delta_z^L]"
        )
    return Prediction(a * delta_z.value, math.log(a) + delta_z.log_value, Kind.APPROXIMATION, label)


def bn_delta_u_variance(cfg: NetworkConfig) -> Prediction:
    """Var[dE/du^l] for batch-normalized blocks."""
    _require(cfg, bn=True)
    delta_z = bn_delta_variance(cfg)
    if cfg.block is BlockKind.BN_PRE_ACT:
        return delta_z
    a = cfg.a
    return Prediction(
        a * delta_z.value, math.log(a) + delta_z.log_value, Kind.APPROXIMATION,
        f"Var[delta^l] = {a:g} Var[delta_z^l]",
    )


# -- tables and scalar analyses -----------------------------------------------


QUANTITIES = ("var_z", "var_delta_z", "var_delta", "var_grad")


@dataclass(frozen=True)
class PredictionTable:
    """Predicted variances per layer for one configuration.

    For batch-normalized blocks ``var_z`` is the per-unit batch variance
    sigma_l^2 (full form).
    """

    cfg: NetworkConfig
    var_z: Prediction
    var_delta_z: Prediction
    var_delta: Prediction
    var_grad: Prediction

    @property
    def depth(self):
        return self.cfg.depth

    def columns(self):
        return {q: getattr(self, q) for q in QUANTITIES}

    def rows(self, log_space: bool = False):
        """Flat rows for CSV export."""
        out = []
        cols = self.columns()
        for i in range(self.depth):
            row = {"layer": i + 1}
            for name, pred in cols.items():
                col = f"predicted_{name}"
                if log_space:
                    row[col + "_log10"] = float(pred.log10[i])
                else:
                    row[col] = float(pred.value[i])
                row[f"kind_{name}"] = pred.kind.value
                row[f"label_{name}"] = pred.label
            out.append(row)
        return out


def predict(cfg: NetworkConfig) -> PredictionTable:
    if cfg.block is BlockKind.PLAIN:
        if cfg.activation is Activation.IDENTITY:
            var_z = forward_variance_identity(cfg)
        else:
            var_z = forward_variance_relu_lower_bound(cfg)
        return PredictionTable(
            cfg, var_z, backward_delta_z_variance(cfg), backward_delta_variance(cfg),
            gradient_variance_plain(cfg),
        )
    full, _ = bn_sigma_squared(cfg)
    return PredictionTable(
        cfg, full, bn_delta_variance(cfg), bn_delta_u_variance(cfg), bn_gradient_variance(cfg)
    )


@dataclass(frozen=True)
class Robustness:
    resnet_factor: float
    plain_factor: float
    log_resnet_factor: float
    log_plain_factor: float


def robustness_factors(L: int, multiplier: float) -> Robustness:
    """Growth of Var[z^L] when n Var[w] is ``multiplier`` times its recommended value.

    Residual (depth-scaled): (1 + multiplier/L)^L, tending to e^multiplier.
    Plain: multiplier^L.
    """
    if L < 1 or not multiplier > 0:
        raise ConfigError(f"need L >= 1 and multiplier > 0, got L={L}, multiplier={multiplier}")
    log_res = L * math.log1p(multiplier / L)
    log_plain = L * math.log(multiplier)

    def power(base, exp):
        try:
            return math.pow(base, exp)
        except OverflowError:
            return math.inf

    return Robustness(power(1.0 + multiplier / L, L), power(multiplier, L), log_res, log_plain)


# depths beyond this are not exactly representable as float64 integers
SATURATION_DEPTH = 2**53


@dataclass(frozen=True)
class DepthLimit:
    max_depth: int
    weight_std: float
    saturated: bool
    format: FloatFormat


def depth_limit(fmt: FloatFormat, n: int, c: float) -> DepthLimit:
    """Deepest L whose proposed variance c/(nL) is still a normal number in ``fmt``."""
    if not (c > 0 and math.isfinite(c)):
        raise ConfigError(f"c must be positive and finite, got {c!r}")
    if n < 1:
        raise ConfigError(f"fan-in must be >= 1, got {n}")
    exact = Fraction(c) / (n * Fraction(fmt.min_positive_normal))
    max_depth = math.floor(exact)
    if max_depth < 1:
        raise ConfigError(f"c/n = {c}/{n} is already below the smallest normal of {fmt.name}")
    weight_std = math.sqrt(c / n / max_depth)
    return DepthLimit(max_depth, weight_std, max_depth > SATURATION_DEPTH, fmt)
