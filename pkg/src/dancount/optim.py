"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import NumericError, ValidationError


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Adam over a named parameter mapping.

    ``step`` raises if a parameter has no gradient, then clears all grads.
    """

    def __init__(self, params: dict[str, Tensor], lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValidationError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        missing = [name for name, p in self.params.items() if p.grad is None]
        if missing:
            raise ValidationError(f"adam step without gradients for: {', '.join(missing)}")
        st = self.state
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1**st.step
        c2 = 1.0 - b2**st.step
        for name, p in self.params.items():
            g = p.grad.astype(p.data.dtype, copy=False)
            m, v = st.m[name], st.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (st.lr / c1) * m / (np.sqrt(v / c2) + st.eps)
            if not np.isfinite(update).all():
                raise NumericError(f"non-finite Adam update for {name}")
            p.data -= update.astype(p.data.dtype, copy=False)
        self.zero_grad()
