"""Differentiation contract shared by every pipeline stage.

Each stage exposes a forward function returning (outputs, cache) and a
matching vector-Jacobian product consuming (cache, output cotangent).  The
full render-and-loss pipeline (see pipeline.py) composes these into one
reverse pass whose results land in a GradTape: per-parameter gradients plus
the per-Gaussian screen-space gradient statistics the densifier consumes.

This module holds the tape, the finite-difference verification harness and a
helper for checking a single op in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MissingActivationError(RuntimeError):
    """Backward was requested before the forward pass saved activations."""


class NonFiniteLossError(RuntimeError):
    """A forward evaluation produced NaN or infinity."""


@dataclass
class GradTape:
    """Accumulated gradients for one backward pass.

    param_grads maps parameter name to an array of the parameter's shape.
    ndc_grad_norm[i] is the L2 norm of the loss gradient with respect to
    Gaussian i's NDC center for this view; visible[i] says whether the
    Gaussian had nonzero compositing weight in any pixel (Gaussians that are
    culled or never contribute record no sample).
    """

    param_grads: dict = field(default_factory=dict)
    ndc_grad_norm: np.ndarray | None = None
    visible: np.ndarray | None = None
    l_hat: np.ndarray | None = None  # virtual illumination from this pass

    def add(self, name, grad):
        if name in self.param_grads:
            self.param_grads[name] = self.param_grads[name] + grad
        else:
            self.param_grads[name] = np.array(grad, dtype=float, copy=True)

    def zero(self):
        for name in self.param_grads:
            self.param_grads[name][...] = 0.0
        if self.ndc_grad_norm is not None:
            self.ndc_grad_norm[...] = 0.0
        if self.visible is not None:
            self.visible[...] = False


def finite_diff_check(loss_fn, params, analytic, names=None, step=1e-5,
                      max_coords=None, rng=None, denom_floor=5e-6):
    """Compare analytic gradients against central finite differences.

    loss_fn() re-evaluates the scalar loss from the live arrays in `params`
    (name -> array, mutated in place).  `analytic` maps the same names to
    gradient arrays.  Returns (max_relative_error, worst_name).

    Relative error per coordinate is |a - fd| / max(|a|, |fd|, denom_floor).
    The floor turns the check into an absolute comparison for coordinates
    whose gradient is below it: central differences of an O(1) loss carry
    ~1e-11 round-off noise at the default step, so relative comparison is
    meaningless there.  A non-finite forward value aborts with a diagnostic
    naming the parameter.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if names is None:
        names = list(params.keys())
    worst = 0.0
    worst_name = None
    for name in names:
        arr = params[name]
        grad = analytic[name]
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + step
            lp = loss_fn()
            flat[j] = orig - step
            lm = loss_fn()
            flat[j] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NonFiniteLossError(
                    f"non-finite loss while probing {name}[{j}]: f(+h)={lp}, f(-h)={lm}")
            fd = (lp - lm) / (2.0 * step)
            a = gflat[j]
            err = abs(a - fd) / max(abs(a), abs(fd), denom_floor)
            if err > worst:
                worst = err
                worst_name = f"{name}[{j}]"
    return worst, worst_name


def check_op(forward, inputs, step=1e-6, cotangent=None, rng=None):
    """Gradient-check a single op in isolation.

    forward(*inputs) must return (output, vjp) where vjp(dy) returns a tuple
    of input cotangents.  Inputs are flat arrays or scalars; returns the max
    relative error over all input coordinates for a random cotangent.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    out, vjp = forward(*inputs)
    if cotangent is None:
        cotangent = rng.standard_normal(np.shape(out)) if np.ndim(out) else 1.0
    grads = vjp(cotangent)
    worst = 0.0
    for k, x in enumerate(inputs):
        x = np.asarray(x, dtype=float)
        g = np.asarray(grads[k], dtype=float)
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            op, _ = forward(*inputs)
            flat[j] = orig - step
            om, _ = forward(*inputs)
            flat[j] = orig
            fd = np.sum((np.asarray(op) - np.asarray(om)) * cotangent) / (2 * step)
            a = g.reshape(-1)[j]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
