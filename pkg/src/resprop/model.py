"""Domain types for the simplified residual network family.

A network is a stack of ``depth`` residual blocks of equal width ``n``.
Three block kinds are supported:

* ``plain``:       u = W z,           z' = f(u) + z
* ``bn_pre_add``:  u = W bn(z),       z' = f(u) + z
* ``bn_pre_act``:  z' = W f(bn(z)) + z

``bn`` is per-unit standardization over the minibatch with the biased
(1/N) variance and no learnable scale or shift.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional


class ConfigError(ValueError):
    """Invalid experiment or network configuration."""


class ContractError(ValueError):
    """An operation was called outside its precondition (wrong block kind, shapes...)."""


class DegenerateBatchError(ArithmeticError):
    """A unit has zero batch standard deviation, so batch norm is undefined."""

    def __init__(self, message, layer=None, trial=None):
        super().__init__(message)
        self.layer = layer
        self.trial = trial

    def __str__(self):
        msg = super().__str__()
        if self.trial is not None:
            msg = f"trial {self.trial}: {msg}"
        return msg


class Activation(str, enum.Enum):
    IDENTITY = "identity"
    RELU = "relu"

    @property
    def derivative_coefficient(self) -> float:
        """E[f'(u)] for symmetric u: 1 for identity, 1/2 for ReLU."""
        return 1.0 if self is Activation.IDENTITY else 0.5

    def __call__(self, x):
        if self is Activation.IDENTITY:
            return x
        return x * (x > 0)

    def derivative(self, x):
        # f'(0) = 0 for ReLU
        if self is Activation.IDENTITY:
            return 1.0 + 0.0 * x
        return (x > 0).astype(float)


class BlockKind(str, enum.Enum):
    PLAIN = "plain"
    BN_PRE_ADD = "bn_pre_add"
    BN_PRE_ACT = "bn_pre_act"

    @property
    def uses_batchnorm(self) -> bool:
        return self is not BlockKind.PLAIN


class Scheme(str, enum.Enum):
    PROPOSED = "proposed"
    HE = "he"
    GLOROT = "glorot"
    FIXED = "fixed"


class Distribution(str, enum.Enum):
    GAUSSIAN = "gaussian"
    UNIFORM = "uniform"
    RADEMACHER = "rademacher"


@dataclass(frozen=True)
class InitScheme:
    """Weight initialization: a variance rule plus a symmetric distribution.

    ``param`` is ``c`` for the depth-scaled proposal, the gain for He-style,
    the variance itself for fixed, and unused for Glorot-style.
    """

    scheme: Scheme = Scheme.PROPOSED
    param: Optional[float] = 1.0
    distribution: Distribution = Distribution.GAUSSIAN

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "distribution", Distribution(self.distribution))
        if self.scheme is Scheme.GLOROT:
            object.__setattr__(self, "param", None)
            return
        if self.param is None or not self.param > 0 or not math.isfinite(self.param):
            raise ConfigError(
                f"init scheme {self.scheme.value!r} needs a positive finite parameter, got {self.param!r}"
            )

    @classmethod
    def proposed(cls, c=1.0, distribution=Distribution.GAUSSIAN):
        return cls(Scheme.PROPOSED, c, distribution)

    @classmethod
    def he(cls, gain=2.0, distribution=Distribution.GAUSSIAN):
        return cls(Scheme.HE, gain, distribution)

    @classmethod
    def glorot(cls, distribution=Distribution.GAUSSIAN):
        return cls(Scheme.GLOROT, None, distribution)

    @classmethod
    def fixed(cls, variance, distribution=Distribution.GAUSSIAN):
        return cls(Scheme.FIXED, variance, distribution)


def variance_of(init: InitScheme, n: int, L: int) -> float:
    """Weight variance prescribed by ``init`` for fan-in ``n`` and depth ``L``.

    Only the depth-scaled proposal c/(nL) depends on ``L``.
    """
    if n < 1 or L < 1:
        raise ConfigError(f"fan-in and depth must be >= 1, got n={n}, L={L}")
    if init.scheme is Scheme.PROPOSED:
        return init.param / (n * L)
    if init.scheme is Scheme.HE:
        return init.param / n
    if init.scheme is Scheme.GLOROT:
        return 1.0 / n
    return float(init.param)


@dataclass(frozen=True)
class NetworkConfig:
    depth: int
    width: int
    activation: Activation = Activation.IDENTITY
    block: BlockKind = BlockKind.PLAIN
    init: InitScheme = field(default_factory=InitScheme)
    batch_size: int = 256
    input_variance: float = 1.0
    output_delta_variance: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "block", BlockKind(self.block))
        for name in ("depth", "width", "batch_size"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.block.uses_batchnorm and self.batch_size < 2:
            raise ConfigError("batch-normalized blocks need batch_size >= 2")
        for name in ("input_variance", "output_delta_variance"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ConfigError(f"{name} must be finite and >= 0, got {value!r}")

    @property
    def weight_variance(self) -> float:
        return variance_of(self.init, self.width, self.depth)

    @property
    def a(self) -> float:
        return self.activation.derivative_coefficient

    def replace(self, **changes) -> "NetworkConfig":
        data = {f: getattr(self, f) for f in self.__dataclass_fields__}
        data.update(changes)
        return NetworkConfig(**data)

    def to_dict(self) -> dict:
        init = {"scheme": self.init.scheme.value, "distribution": self.init.distribution.value}
        if self.init.scheme is Scheme.PROPOSED:
            init["c"] = self.init.param
        elif self.init.scheme is Scheme.HE:
            init["gain"] = self.init.param
        elif self.init.scheme is Scheme.FIXED:
            init["variance"] = self.init.param
        return {
            "network": {
                "depth": self.depth,
                "width": self.width,
                "activation": self.activation.value,
                "block": self.block.value,
                "batch_size": self.batch_size,
                "input_variance": self.input_variance,
                "output_delta_variance": self.output_delta_variance,
            },
            "init": init,
        }


@dataclass(frozen=True)
class FloatFormat:
    name: str
    min_positive_normal: float
    significand_bits: int


FLOAT_FORMATS = {
    "fp16": FloatFormat("fp16", 2.0**-14, 11),
    "bf16": FloatFormat("bf16", 2.0**-126, 8),
    "fp32": FloatFormat("fp32", 2.0**-126, 24),
    "fp64": FloatFormat("fp64", 2.0**-1022, 53),
}


def float_format(name: str) -> FloatFormat:
    try:
        return FLOAT_FORMATS[name.lower()]
    except KeyError:
        raise ConfigError(
            f"unknown float format {name!r}; choose from {', '.join(FLOAT_FORMATS)}"
        ) from None


__all__ = [
    "Activation",
    "BlockKind",
    "ConfigError",
    "ContractError",
    "DegenerateBatchError",
    "Distribution",
    "FLOAT_FORMATS",
    "FloatFormat",
    "InitScheme",
    "NetworkConfig",
    "Scheme",
    "float_format",
    "variance_of",
]
