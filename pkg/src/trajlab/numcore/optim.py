"""Adam optimizer over named parameter dictionaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class GradientError(RuntimeError):
    """A gradient contains NaN/Inf; the update was aborted."""


@dataclass
class AdamState:
    """First/second moment buffers plus the scalar schedule knobs.

    ``m``/``v`` are keyed like the parameter dict and shaped identically;
    ``step`` counts completed updates and increases by exactly 1 per call.
    """

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def ensure(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            elif self.m[name].shape != p.data.shape:
                raise ValueError(f"Adam moment shape mismatch for '{name}'")


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray] | None, state: AdamState):
    """Apply one bias-corrected Adam update in place.

    ``grads`` defaults to each parameter's ``.grad``. Any NaN/Inf gradient
    aborts the whole update (no parameter is touched) and reports where.
    """
    if grads is None:
        grads = {}
        for name, p in params.items():
            if p.grad is None:
                raise GradientError(f"parameter '{name}' has no gradient")
            grads[name] = p.grad
    state.ensure(params)

    for name in params:
        g = grads[name]
        if not np.isfinite(g).all():
            bad = np.argwhere(~np.isfinite(g))[0]
            raise GradientError(f"non-finite gradient for '{name}' at index {tuple(bad)}")

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
