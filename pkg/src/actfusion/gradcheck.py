"""Central finite-difference checks for reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

DEFAULT_H = 1e-5
DEFAULT_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    max_rel_error: float
    max_abs_error: float
    checked: int
    worst: tuple[int, int] | None  # (tensor index, flat element index)
    kinks: int = 0  # elements excluded because the probe straddled a ReLU/max-pool switch

    def ok(self, rtol: float = 1e-4) -> bool:
        return self.max_rel_error <= rtol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = DEFAULT_H,
                       elements: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (perturbed in place, then restored).

    With ``elements`` only those flat indices are probed; the others stay 0.
    """
    grad = np.zeros(x.size)
    flat = x.reshape(-1)
    for i in range(x.size) if elements is None else elements:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def _analytic(loss_fn, params) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    loss_fn().backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def _straddles_kink(loss_fn, params, ti: int, i: int, h: float, base: float, rtol: float, floor: float) -> bool:
    """True when the probe crosses a non-smooth point and the analytic value is still right.

    The analytic derivative must jump between ``x - h`` and ``x + h``, and a
    probe 100 times narrower (which almost surely misses the switch) must
    agree with it; a wrong backward rule fails the second test.
    """
    flat = params[ti].data.reshape(-1)
    old = flat[i]
    vals = []
    for shift in (h, -h):
        flat[i] = old + shift
        vals.append(_analytic(loss_fn, params)[ti].reshape(-1)[i])
        flat[i] = old
    if not any(relative_error(v, base, floor) > rtol for v in vals):
        return False
    fine = numerical_gradient(lambda: float(loss_fn().data), params[ti].data, h / 100, [i]).reshape(-1)[i]
    return bool(relative_error(base, fine, floor) <= rtol)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = DEFAULT_H,
                    max_per_tensor: int | None = None, rng: np.random.Generator | None = None,
                    floor: float = DEFAULT_FLOOR, rtol: float = 1e-4) -> GradCheckResult:
    """Compare ``backward`` gradients of ``loss_fn()`` with central differences.

    ``max_per_tensor`` caps the probed elements of each tensor (sampled with
    ``rng``) so large layers stay cheap. Piecewise-linear units make the loss
    non-smooth on a measure-zero set; an element whose error exceeds
    ``rtol`` is excluded (and counted in ``kinks``) only if the analytic
    derivative itself jumps between ``x - h`` and ``x + h`` and a narrower
    probe confirms the analytic value.

    ``floor`` is relative to the loss magnitude: central differences of a
    loss of size ``|L|`` carry roundoff of about ``|L| * eps / h``, so
    gradients far below ``floor * max(1, |L|)`` count as zero.
    """
    rng = rng or np.random.default_rng(0)
    analytic = _analytic(loss_fn, params)
    floor = floor * max(1.0, abs(float(loss_fn().data)))

    def value() -> float:
        return float(loss_fn().data)

    worst_rel, worst_abs, checked, worst, kinks = 0.0, 0.0, 0, None, 0
    for ti, (p, a) in enumerate(zip(params, analytic)):
        if max_per_tensor is not None and p.size > max_per_tensor:
            idx = np.sort(rng.choice(p.size, size=max_per_tensor, replace=False))
        else:
            idx = np.arange(p.size)
        num = numerical_gradient(value, p.data, h, idx).reshape(-1)[idx]
        ana = a.reshape(-1)[idx]
        rel = relative_error(ana, num, floor)
        keep = np.ones(len(idx), dtype=bool)
        for j in np.flatnonzero(rel > rtol):
            if _straddles_kink(loss_fn, params, ti, int(idx[j]), h, ana[j], rtol, floor):
                keep[j] = False
                kinks += 1
        checked += int(keep.sum())
        if keep.any():
            rel_k = np.where(keep, rel, -1.0)
            j = int(np.argmax(rel_k))
            if rel_k[j] > worst_rel:
                worst_rel, worst = float(rel_k[j]), (ti, int(idx[j]))
            worst_abs = max(worst_abs, float(np.max(np.abs(ana - num)[keep])))
    for p in params:
        p.grad = None
    return GradCheckResult(worst_rel, worst_abs, checked, worst, kinks)
