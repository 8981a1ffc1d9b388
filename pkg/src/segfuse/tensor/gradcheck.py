"""Central finite-difference verification of autodiff gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, Tuple, Union

import numpy as np

from segfuse.errors import DomainError
from segfuse.tensor.tensor import Tensor, no_grad, record_kinks

Params = Union[Mapping[str, Tensor], Sequence[Tensor]]


@dataclass
class GradientReport:
    max_error: float
    checked: int
    skipped: int  # entries whose +/- epsilon evaluations put some ReLU input on opposite sides of zero


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor).

    The floor keeps entries whose true gradient is zero or tiny from turning
    central-difference roundoff (about |loss| * 1e-16 / epsilon, so ~1e-11 at
    epsilon 1e-5) into a large relative error.
    """
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def _crossed(up: list, down: list) -> bool:
    return len(up) != len(down) or any(not np.array_equal(u, d) for u, d in zip(up, down))


def _central(loss_fn: Callable[[], Tensor], param: Tensor, epsilon: float) -> Tuple[np.ndarray, np.ndarray]:
    grad = np.zeros_like(param.data)
    crossed = np.zeros(param.data.shape, dtype=bool)
    flat = param.data.reshape(-1)
    gflat, cflat = grad.reshape(-1), crossed.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            with record_kinks() as signs_up:
                up = float(loss_fn().data)
            flat[i] = orig - epsilon
            with record_kinks() as signs_down:
                down = float(loss_fn().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * epsilon)
            cflat[i] = _crossed(signs_up, signs_down)
    return grad, crossed


def numerical_gradient(loss_fn: Callable[[], Tensor], param: Tensor, epsilon: float = 1e-5) -> np.ndarray:
    return _central(loss_fn, param, epsilon)[0]


def gradient_check_report(loss_fn: Callable[[], Tensor], params: Params, epsilon: float = 1e-5,
                          floor: float = 1e-6, skip_kinks: bool = False) -> GradientReport:
    """Compare autodiff against central differences entry by entry.

    ``loss_fn`` rebuilds the graph from the current parameter values and
    returns a scalar tensor. Gradients on ``params`` are reset before and
    after the check. With ``skip_kinks`` an entry is left out (and counted)
    when nudging it by +/- epsilon flips the sign of any ReLU input, because
    the loss is not differentiable inside that interval.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise DomainError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    tensors = list(params.values()) if isinstance(params, Mapping) else list(params)
    for p in tensors:
        p.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in tensors]
    for p in tensors:
        p.grad = None
    worst, checked, skipped = 0.0, 0, 0
    for p, a in zip(tensors, analytic):
        n, crossed = _central(loss_fn, p, epsilon)
        keep = ~crossed if skip_kinks else np.ones_like(crossed)
        skipped += int(crossed.sum()) if skip_kinks else 0
        checked += int(keep.sum())
        if keep.any():
            worst = max(worst, float(relative_error(a[keep], n[keep], floor).max()))
    return GradientReport(worst, checked, skipped)


def gradient_check(loss_fn: Callable[[], Tensor], params: Params, epsilon: float = 1e-5,
                   floor: float = 1e-6, skip_kinks: bool = False) -> float:
    """Worst elementwise relative error between autodiff and central differences."""
    return gradient_check_report(loss_fn, params, epsilon, floor, skip_kinks).max_error
