"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, backward

ABS_FLOOR = 1e-8


@dataclass
class GradcheckReport:
    max_rel_error: float
    passed: bool
    worst_param: str | None = None
    worst_index: tuple | None = None

    def __bool__(self) -> bool:
        return self.passed


def analytic_gradient(fn: Callable[[dict], Tensor], params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    with Tape() as tape:
        tape.watch(dict(params))
        loss = fn(dict(params))
    return {k: v.data for k, v in backward(tape, loss).items()}


def numerical_gradient(fn: Callable[[dict], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5) -> dict[str, np.ndarray]:
    """(f(theta + eps) - f(theta - eps)) / (2 eps), one coordinate at a time."""
    params = dict(params)
    out = {}
    for name, t in params.items():
        base = t.numpy()
        grad = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn({**params, name: Tensor(base)}).item()
            flat[i] = orig - eps
            f_minus = fn({**params, name: Tensor(base)}).item()
            flat[i] = orig
            grad.reshape(-1)[i] = (f_plus - f_minus) / (2 * eps)
        out[name] = grad
    return out


def resolvable_floor(loss: float, eps: float, tolerance: float) -> float:
    """Smallest gradient magnitude a central difference resolves to ``tolerance``.

    Round-off in f(theta +- eps) leaves about ulp(|f|) / eps of absolute noise
    in the quotient; entries below noise / tolerance are compared against it.
    """
    return max(ABS_FLOOR, np.finfo(np.float64).eps * max(1.0, abs(loss)) / (eps * tolerance))


def compare_gradients(
    analytic: Mapping[str, np.ndarray],
    numeric: Mapping[str, np.ndarray],
    tolerance: float = 1e-4,
    floor: float = ABS_FLOOR,
) -> GradcheckReport:
    worst, worst_name, worst_idx = 0.0, None, None
    for name, a in analytic.items():
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(numeric[name], dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        rel = np.abs(a - n) / denom
        if rel.size and rel.max() > worst:
            worst = float(rel.max())
            worst_name = name
            worst_idx = np.unravel_index(int(rel.argmax()), rel.shape)
    return GradcheckReport(worst, worst <= tolerance, worst_name, worst_idx)


def gradcheck(
    fn: Callable[[dict], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradcheckReport:
    """Compare tape gradients of scalar ``fn(params)`` against finite differences.

    All parameters must be double precision; single precision round-off
    swamps the finite-difference quotient.
    """
    if not 1e-5 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-5, 1e-3]")
    for name, t in params.items():
        if t.dtype != np.float64:
            raise TypeError(f"gradcheck needs float64 parameters, {name} is {t.dtype}")
    floor = resolvable_floor(fn(dict(params)).item(), eps, tolerance)
    return compare_gradients(analytic_gradient(fn, params), numerical_gradient(fn, params, eps), tolerance, floor)
