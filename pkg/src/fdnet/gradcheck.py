"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor, backward


def numeric_grad(f: Callable[[Tensor], Tensor], point: np.ndarray, eps: float = 1e-4, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``point`` (float64).

    Only the flat indices in ``coords`` are perturbed when given; other
    entries of the result stay zero.
    """
    x = np.array(point, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = float(f(Tensor(x.copy())).data)
        flat[i] = old - eps
        fm = float(f(Tensor(x.copy())).data)
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is not finite near coordinate {i}")
        out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)


def analytic_grad(f: Callable[[Tensor], Tensor], point: np.ndarray) -> np.ndarray:
    x = Tensor(np.array(point, dtype=np.float64), requires_grad=True, name="x")
    with Tape() as tape:
        y = f(x)
    if not np.isfinite(y.data).all():
        raise NonFiniteError("f is not finite at the check point")
    return backward(tape, y, {"x": x})["x"]


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(f: Callable[[Tensor], Tensor], point: np.ndarray, eps: float = 1e-4, coords=None) -> float:
    """Max relative error between tape and central-difference gradients.

    ``coords`` optionally restricts the comparison to a subset of flat indices,
    which keeps checks on large parameter tensors affordable.
    """
    a = analytic_grad(f, point)
    n = numeric_grad(f, point, eps, coords)
    if coords is not None:
        sel = np.asarray(list(coords))
        return float(relative_errors(a.reshape(-1)[sel], n.reshape(-1)[sel]).max())
    return float(relative_errors(a, n).max())
