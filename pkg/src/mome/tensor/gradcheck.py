"""Central finite-difference checks against tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import Tensor, backward, no_grad, reset_tape

EPS = 1e-3
RTOL = 1e-3
ATOL = 1e-5


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    worst_input: int
    checked: int


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, eps: float = EPS,
                       entries: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x.data`` (mutated in place
    and restored). ``entries`` restricts the flat indices that are perturbed."""
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if entries is None else entries
    with no_grad():
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = float(f().data)
            flat[i] = old - eps
            fm = float(f().data)
            flat[i] = old
            grad[i] = (fp - fm) / (2 * eps)
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = ATOL) -> np.ndarray:
    """Elementwise error scaled so that values <= RTOL pass; entries whose absolute
    error is under ``atol`` report zero."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), 0.0)
    return np.where(diff <= atol, 0.0, rel)


def check_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = EPS,
                    rtol: float = RTOL, atol: float = ATOL, max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare tape gradients of scalar ``f()`` with central differences.

    With ``max_entries`` set, a random subset of entries of each input is
    perturbed (large parameter tensors).
    """
    reset_tape()
    for t in inputs:
        t.grad = None
    loss = f()
    backward(loss)
    worst, worst_i, checked = 0.0, -1, 0
    for i, t in enumerate(inputs):
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        entries = None
        if max_entries is not None and t.size > max_entries:
            rng = rng or np.random.default_rng(0)
            entries = rng.choice(t.size, size=max_entries, replace=False)
        numeric = numerical_gradient(f, t, eps, entries)
        if entries is not None:
            a, n = analytic.reshape(-1)[entries], numeric.reshape(-1)[entries]
        else:
            a, n = analytic, numeric
        err = float(relative_error(a, n, atol).max(initial=0.0))
        checked += a.size
        if err > worst:
            worst, worst_i = err, i
    return GradCheckResult(worst <= rtol, worst, worst_i, checked)


def random_projection(out: Tensor, rng: np.random.Generator) -> np.ndarray:
    """Fixed random weights turning a tensor-valued op into a scalar test function."""
    return rng.standard_normal(out.shape).astype(out.dtype)
