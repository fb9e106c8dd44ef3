"""Forward and backward passes of the residual network family.

Samples are rows: a minibatch is an ``(N, n)`` array and block ``l``
computes ``u = z @ W.T``. Lists in a :class:`PropagationTrace` are indexed
by block, so ``trace.u[l - 1]`` is u^l and ``trace.z[l]`` is z^l with
``trace.z[0]`` the input.

The backward pass takes per-sample output deltas ``D`` with the convention
dE/dz^L_s = D_s / N, i.e. the loss is a batch mean. Weight gradients are
therefore batch means of the per-sample outer products.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .model import BlockKind, ContractError, DegenerateBatchError, NetworkConfig
from .sampling import NetworkWeights

# relative floor under which a batch std counts as zero
_DEGENERATE_RTOL = 64 * np.finfo(float).eps


@dataclass
class PropagationTrace:
    """Per-block record of one minibatch pass.

    ``z_hat``, ``mu`` and ``sigma`` describe the normalization performed
    inside block ``l`` (of z^{l-1}); they stay empty for plain blocks.
    """

    z: List[np.ndarray] = field(default_factory=list)
    u: List[np.ndarray] = field(default_factory=list)
    z_hat: List[np.ndarray] = field(default_factory=list)
    mu: List[np.ndarray] = field(default_factory=list)
    sigma: List[np.ndarray] = field(default_factory=list)
    delta_z: List[np.ndarray] = field(default_factory=list)
    delta: List[np.ndarray] = field(default_factory=list)
    grad: List[np.ndarray] = field(default_factory=list)
    delta_input: Optional[np.ndarray] = None

    @property
    def depth(self):
        return len(self.u)

    @property
    def output(self):
        return self.z[-1]

    def to_json(self, indent=None) -> str:
        def lists(arrs):
            return [np.asarray(a).tolist() for a in arrs]

        payload = {
            name: lists(getattr(self, name))
            for name in ("z", "u", "z_hat", "mu", "sigma", "delta_z", "delta", "grad")
        }
        if self.delta_input is not None:
            payload["delta_input"] = self.delta_input.tolist()
        return json.dumps(payload, indent=indent)


def batchnorm(z):
    """Standardize each column of ``z`` with its biased batch statistics."""
    mu = z.mean(axis=0)
    centered = z - mu
    sigma = np.sqrt((centered * centered).mean(axis=0))
    floor = _DEGENERATE_RTOL * np.maximum(np.abs(mu), np.finfo(float).tiny)
    bad = ~(sigma > floor)
    if np.any(bad):
        raise DegenerateBatchError(
            f"zero batch standard deviation at unit(s) {np.flatnonzero(bad)[:8].tolist()}"
        )
    return centered / sigma, mu, sigma


def batchnorm_backward(grad_zhat, z_hat, sigma):
    """Pull dE/dz_hat back through batch normalization, exactly for finite N."""
    g = grad_zhat
    return (g - g.mean(axis=0) - z_hat * (g * z_hat).mean(axis=0)) / sigma


def batchnorm_jacobian(z_col):
    """Full ``N x N`` Jacobian d z_hat_i / d z_j for one unit's batch column.

    J_ij = (delta_ij - 1/N) / sigma - z_hat_i z_hat_j / (N sigma). Every row
    sums to zero because normalization ignores a common shift.
    """
    z_col = np.asarray(z_col, dtype=float)
    if z_col.ndim != 1 or z_col.size < 2:
        raise ContractError("batchnorm_jacobian needs a 1-D column with at least 2 samples")
    z_hat, _, sigma = batchnorm(z_col[:, None])
    z_hat = z_hat[:, 0]
    sigma = sigma[0]
    N = z_col.size
    return (np.eye(N) - 1.0 / N) / sigma - np.outer(z_hat, z_hat) / (N * sigma)


def _check_inputs(cfg, W, X):
    if len(W) != cfg.depth:
        raise ContractError(f"expected {cfg.depth} weight matrices, got {len(W)}")
    for w in W:
        if w.shape != (cfg.width, cfg.width):
            raise ContractError(f"weight shape {w.shape} != {(cfg.width, cfg.width)}")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != cfg.width:
        raise ContractError(f"input shape {X.shape} incompatible with width {cfg.width}")
    if cfg.block.uses_batchnorm and X.shape[0] < 2:
        raise ContractError("batch-normalized blocks need at least 2 samples")
    return X


def forward(cfg: NetworkConfig, W: NetworkWeights, X) -> PropagationTrace:
    X = _check_inputs(cfg, W, X)
    f = cfg.activation
    block = cfg.block
    trace = PropagationTrace(z=[X])
    z = X
    for layer, w in enumerate(W, start=1):
        if block is BlockKind.PLAIN:
            u = z @ w.T
            z_next = f(u) + z
        else:
            try:
                z_hat, mu, sigma = batchnorm(z)
            except DegenerateBatchError as err:
                err.layer = layer
                raise
            trace.z_hat.append(z_hat)
            trace.mu.append(mu)
            trace.sigma.append(sigma)
            if block is BlockKind.BN_PRE_ADD:
                u = z_hat @ w.T
                z_next = f(u) + z
            else:
                u = f(z_hat) @ w.T
                z_next = u + z
        trace.u.append(u)
        trace.z.append(z_next)
        z = z_next
    return trace


def backward(cfg: NetworkConfig, W: NetworkWeights, trace: PropagationTrace, delta_out):
    """Fill ``delta_z``, ``delta`` and ``grad`` of ``trace`` and return it."""
    delta_out = np.asarray(delta_out, dtype=float)
    if trace.depth != cfg.depth or len(W) != cfg.depth:
        raise ContractError("trace, weights and config disagree on depth")
    if delta_out.shape != trace.output.shape:
        raise ContractError(
            f"delta_out shape {delta_out.shape} != output shape {trace.output.shape}"
        )
    f = cfg.activation
    block = cfg.block
    N = delta_out.shape[0]
    L = cfg.depth
    delta_z = [None] * L
    delta = [None] * L
    grad = [None] * L

    dz = delta_out
    for i in range(L - 1, -1, -1):
        w = W[i]
        delta_z[i] = dz
        if block is BlockKind.PLAIN:
            d = f.derivative(trace.u[i]) * dz
            grad[i] = d.T @ trace.z[i] / N
            dz = dz + d @ w
        elif block is BlockKind.BN_PRE_ADD:
            d = f.derivative(trace.u[i]) * dz
            grad[i] = d.T @ trace.z_hat[i] / N
            dz = dz + batchnorm_backward(d @ w, trace.z_hat[i], trace.sigma[i])
        else:
            d = dz
            z_hat = trace.z_hat[i]
            grad[i] = d.T @ f(z_hat) / N
            dz = dz + batchnorm_backward(f.derivative(z_hat) * (d @ w), z_hat, trace.sigma[i])
        delta[i] = d

    trace.delta_z = delta_z
    trace.delta = delta
    trace.grad = grad
    trace.delta_input = dz
    return trace


def run(cfg: NetworkConfig, W: NetworkWeights, X, delta_out) -> PropagationTrace:
    return backward(cfg, W, forward(cfg, W, X), delta_out)


def probe_loss(cfg: NetworkConfig, W: NetworkWeights, X) -> float:
    """E = ||z^L||^2 / (2N); its per-sample output delta is z^L itself."""
    out = forward(cfg, W, X).output
    return 0.5 * float(np.sum(out * out)) / out.shape[0]
