from __future__ import annotations

import numpy as np


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every element of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``max |a - n| / max(|a|, |n|, floor)``; entries where both are ~0 count as exact."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def grad_check(fn, x: np.ndarray, h: float = 1e-5, dy=None, mask=None) -> float:
    """Compare a module's analytic input gradient to central differences.

    ``fn`` is a layer (``forward``/``backward``) or a pair ``(forward, backward)``.
    The scalar under test is ``sum(forward(x) * dy)``; ``dy`` defaults to
    ones (plain sum reduction). ``mask`` selects which input entries to compare,
    e.g. to skip points within ``2h`` of a ReLU kink.
    """
    forward, backward = (fn.forward, fn.backward) if hasattr(fn, "forward") else fn
    x = np.array(x, dtype=np.float64, copy=True)
    y = forward(x)
    dy = np.ones_like(y) if dy is None else np.asarray(dy, dtype=np.float64)
    analytic = np.asarray(backward(dy), dtype=np.float64)

    def scalar():
        return float(np.sum(forward(x) * dy))

    numeric = numeric_grad(scalar, x, h)
    if mask is not None:
        return max_relative_error(analytic[mask], numeric[mask])
    return max_relative_error(analytic, numeric)


def param_grad_check(module, x: np.ndarray, param, h: float = 1e-5, dy=None) -> float:
    """Same as :func:`grad_check` but for one parameter of ``module``."""
    x = np.asarray(x, dtype=np.float64)
    y = module.forward(x)
    dy = np.ones_like(y) if dy is None else np.asarray(dy, dtype=np.float64)
    param.grad = None
    module.backward(dy)
    analytic = np.array(param.grad, copy=True)

    def scalar():
        return float(np.sum(module.forward(x) * dy))

    numeric = numeric_grad(scalar, param.value, h)
    return max_relative_error(analytic, numeric)
