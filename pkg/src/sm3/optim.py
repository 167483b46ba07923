"""AdamW: adaptive moments with bias correction and decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from sm3.diffcore import Tensor
from sm3.errors import NonFiniteError


@dataclass
class AdamWHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamWState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def optimizer_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamWState,
                   hyper: AdamWHyper) -> tuple[list[np.ndarray], AdamWState]:
    """One AdamW update.  Returns new parameter arrays; ``state`` is updated in place.

    The decay shrinks parameters directly (``p *= 1 - lr * wd``) and never
    enters the moment estimates.  Parameters whose gradient is None were not
    reached by the loss and are left untouched.  Any non-finite gradient
    aborts the step before anything is modified.
    """
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient; optimizer step aborted")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            out.append(p)
            continue
        dt = p.dtype.type
        p = p * dt(1.0 - hyper.lr * hyper.weight_decay) if hyper.weight_decay else p.copy()
        m, v = state.m[i], state.v[i]
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        denom = np.sqrt(v / dt(corr2)) + dt(hyper.eps)
        p -= dt(hyper.lr / corr1) * m / denom
        out.append(p)
    return out, state


class AdamW:
    def __init__(self, params: Sequence[Tensor], hyper: AdamWHyper | None = None, **kwargs):
        self.params = list(params)
        self.hyper = hyper or AdamWHyper(**kwargs)
        self.state = AdamWState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        new, self.state = optimizer_step([p.data for p in self.params], [p.grad for p in self.params],
                                         self.state, self.hyper)
        for p, arr in zip(self.params, new):
            p.data = arr
