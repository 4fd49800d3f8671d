"""Adam optimizer with bias correction.

Parameters are a named, ordered mapping of name -> Tensor; the state keeps
per-parameter first/second moments under the same names plus the shared step
counter. Updates are exclusive: nothing else may read or write the parameters
during ``adam_step``.
"""

from dataclasses import dataclass, field

import numpy as np

from vgan.engine import ContractViolation, Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One Adam update over every named parameter, in place.

    ``grads`` maps the same names to gradient arrays (missing or None means
    zero gradient: moments still decay and t still advances).
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractViolation(
                f"gradient shape {g.shape} does not match parameter '{name}' {p.data.shape}"
            )
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params, state


class Adam:
    """Stateful wrapper tying an AdamState to one parameter collection."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        grads = {n: p.grad for n, p in self.params.items()}
        adam_step(self.params, grads, self.state)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def collect_params(params):
    """Flatten helper: accepts dict[str, Tensor] and verifies tensor-ness."""
    for name, p in params.items():
        if not isinstance(p, Tensor):
            raise ContractViolation(f"parameter '{name}' is not a Tensor")
    return params
