from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError


@dataclass
class OptimizerState:
    kind: str = "adam"  # "adam" | "sgd_momentum"
    learning_rate: float = 1e-3
    momentum: float = 0.0
    nesterov: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        for name in ("momentum", "beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")


def optimizer_step(state, params, grads, names=None):
    """Apply one update in place to ``params`` (tensors) given aligned ``grads``.

    Moment buffers are keyed by position, so the same parameter list must be
    passed on every call. Returns ``params``.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads are not aligned")
    names = names or [p.name or f"param[{i}]" for i, p in enumerate(params)]
    for name, g in zip(names, grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    lr = state.learning_rate
    if state.kind == "sgd_momentum":
        for i, (p, g) in enumerate(zip(params, grads)):
            if state.momentum == 0.0:
                p.values -= lr * g
                continue
            buf = state.buffers.get(i)
            buf = g.copy() if buf is None else state.momentum * buf + g
            state.buffers[i] = buf
            direction = g + state.momentum * buf if state.nesterov else buf
            p.values -= lr * direction
    else:
        b1, b2 = state.beta1, state.beta2
        c1 = 1.0 - b1 ** state.step
        c2 = 1.0 - b2 ** state.step
        for i, (p, g) in enumerate(zip(params, grads)):
            m, v = state.buffers.get(i, (np.zeros_like(g), np.zeros_like(g)))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            state.buffers[i] = (m, v)
            p.values -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
