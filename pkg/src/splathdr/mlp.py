"""Small dense MLPs with hand-written forward and backward passes.

All networks in the pipeline are tiny (a few thousand parameters), so the
layers are plain numpy matmuls.  Hidden activations are leaky ReLU with
slope 0.01; the output nonlinearity is named per network ("softplus",
"sigmoid" or None).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

LEAKY_SLOPE = 0.01


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    """Inverse of softplus for positive y, computed stably as y + log(1 - e^-y)."""
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    return expit(x)


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass
class MlpParams:
    """Weights and biases of a dense network.

    weights[i] has shape (out_i, in_i); consecutive layers must chain.
    """

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    output_map: str | None = None

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    def validate(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights/biases length mismatch")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match {w.shape}")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input dim {w.shape[1]} does not chain")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i}: non-finite parameters")

    def copy(self):
        return MlpParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            output_map=self.output_map,
        )


def init_mlp(sizes, output_map, rng, final_bias=0.0):
    """Glorot-uniform weights, zero biases; the last bias can be offset so the
    output map starts at a chosen value (e.g. softplus(b) = 0.5)."""
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    biases[-1][:] = final_bias
    return MlpParams(weights=weights, biases=biases, output_map=output_map)


def mlp_forward(params, x):
    """Evaluate the network on a batch x of shape (B, in_dim).

    Returns (y, cache); the cache holds layer inputs and pre-activations for
    the backward pass.
    """
    inputs = []
    preacts = []
    h = x
    n = params.n_layers
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w.T + b
        preacts.append(z)
        if i < n - 1:
            h = np.where(z > 0, z, LEAKY_SLOPE * z)
        else:
            h = _apply_output_map(params.output_map, z)
    return h, (inputs, preacts)


def _apply_output_map(name, z):
    if name is None:
        return z
    if name == "softplus":
        return softplus(z)
    if name == "sigmoid":
        return sigmoid(z)
    raise ValueError(f"unknown output map {name!r}")


def _output_map_derivative(name, z):
    if name is None:
        return np.ones_like(z)
    if name == "softplus":
        return sigmoid(z)
    if name == "sigmoid":
        s = sigmoid(z)
        return s * (1.0 - s)
    raise ValueError(f"unknown output map {name!r}")


def mlp_backward(params, cache, dy):
    """Vector-Jacobian product of mlp_forward.

    Returns (dx, dweights, dbiases).  Parameter gradients are summed over the
    batch.
    """
    inputs, preacts = cache
    n = params.n_layers
    dweights = [None] * n
    dbiases = [None] * n
    grad = dy
    for i in range(n - 1, -1, -1):
        z = preacts[i]
        if i == n - 1:
            dz = grad * _output_map_derivative(params.output_map, z)
        else:
            dz = grad * np.where(z > 0, 1.0, LEAKY_SLOPE)
        dweights[i] = dz.T @ inputs[i]
        dbiases[i] = dz.sum(axis=0)
        grad = dz @ params.weights[i]
    return grad, dweights, dbiases


def param_items(params, prefix):
    """Yield (name, array) pairs for every tensor in the network."""
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        yield f"{prefix}.w{i}", w
        yield f"{prefix}.b{i}", b
