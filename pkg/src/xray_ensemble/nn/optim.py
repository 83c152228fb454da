from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    """Moment estimates and step counter for :func:`adam_step`."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Both the parameters and the state are returned for convenience; they are
    the same objects that were passed in.
    """
    if set(grads) != set(params):
        raise KeyError(f"gradient keys {sorted(grads)} do not match parameters {sorted(params)}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p -= update.astype(p.dtype, copy=False)
    return params, state
