"""Adam with bias correction over a :class:`ParameterSet`."""
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import NonFiniteError, ShapeError


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    @classmethod
    def for_size(cls, n, **hyper):
        return cls(m=np.zeros(n), v=np.zeros(n), **hyper)


def adam_step(params, grads, state):
    """Update flat ``params`` in place from flat ``grads``; returns ``state``.

    Raises on shape disagreement or a non-finite gradient before touching
    any buffer.
    """
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeError(
            f"adam shapes disagree: params {params.shape}, grads {grads.shape}, "
            f"moments {state.m.shape}"
        )
    if not np.isfinite(grads).all():
        raise NonFiniteError("non-finite gradient passed to adam_step")
    state.step += 1
    kernels.adam_update(params, grads, state.m, state.v, state.lr,
                        state.beta1, state.beta2, state.eps, float(state.step))
    return state
