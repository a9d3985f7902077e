"""Adam over flat parameter vectors.

Functional style: a step maps (state, params, grads) to fresh copies so
a training loop owns the only mutable reference. Updates use the
bias-corrected moments from the original formulation, with epsilon
added outside the square root.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NumericalError
from .network import ParamSet

Array = np.ndarray


@dataclass
class AdamState:
    m: Array
    v: Array
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(m=np.zeros(n), v=np.zeros(n), step=0, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: ParamSet, grads: Array, lr: float) -> tuple[ParamSet, AdamState]:
    """One descent step. Returns new params and new state."""
    g = np.asarray(grads, dtype=np.float64).ravel()
    p = params.values
    if g.shape != p.shape or g.shape != state.m.shape:
        raise InvalidArgumentError(
            f"shape mismatch: params {p.shape}, grads {g.shape}, state {state.m.shape}"
        )
    bad = ~np.isfinite(g)
    if bad.any():
        idx = int(np.argmax(bad))
        raise NumericalError(f"non-finite gradient at flat index {idx} ({g[idx]})")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_values = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m=m, v=v, step=t, beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return ParamSet(new_values), new_state
