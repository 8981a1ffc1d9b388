from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from segfuse.errors import ConfigError, ContractError
from segfuse.tensor.tensor import Tensor

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


class OptimizerKind(str, enum.Enum):
    SGD = "SGD"
    ADAM = "ADAM"


@dataclass
class OptimizerState:
    kind: OptimizerKind
    learning_rate: float
    adam_moments: Dict[str, tuple] = field(default_factory=dict)
    step_count: int = 0
    momentum: float = 0.0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    clip_norm: Optional[float] = None
    last_grad_norm: float = 0.0

    def __post_init__(self):
        self.kind = OptimizerKind(self.kind)
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")


def sgd(lr: float, momentum: float = 0.0, clip_norm: Optional[float] = None) -> OptimizerState:
    """Plain SGD, or heavy-ball SGD (v <- momentum * v + g; p <- p - lr * v) when momentum > 0.

    With ``clip_norm`` the gradients are first rescaled so that their global L2
    norm over all parameters is at most ``clip_norm``.
    """
    return OptimizerState(OptimizerKind.SGD, lr, momentum=momentum, clip_norm=clip_norm)


def adam(lr: float) -> OptimizerState:
    return OptimizerState(OptimizerKind.ADAM, lr)


def optimizer_step(state: OptimizerState, params: Mapping[str, Tensor]) -> None:
    """Apply one update in place and clear every gradient.

    Adam uses bias-corrected first/second moments with the usual
    beta1=0.9, beta2=0.999, eps=1e-8.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient; was it reachable from the loss?")
    state.step_count += 1
    t = state.step_count
    lr = state.learning_rate
    norm = float(np.sqrt(sum(np.sum(p.grad * p.grad) for p in params.values())))
    state.last_grad_norm = norm
    scale = state.clip_norm / norm if state.clip_norm is not None and norm > state.clip_norm else 1.0
    for name, p in params.items():
        g = p.grad * scale if scale != 1.0 else p.grad
        if state.kind is OptimizerKind.SGD:
            if state.momentum:
                g = state.momentum * state.velocity.get(name, np.zeros_like(g)) + g
                state.velocity[name] = g
            p.data = p.data - lr * g
        else:
            m, v = state.adam_moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
            if m.shape != p.shape:
                raise ContractError(f"adam moments for {name!r} have shape {m.shape}, parameter has {p.shape}")
            m = BETA1 * m + (1 - BETA1) * g
            v = BETA2 * v + (1 - BETA2) * g * g
            state.adam_moments[name] = (m, v)
            m_hat = m / (1 - BETA1**t)
            v_hat = v / (1 - BETA2**t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        p.grad = None
