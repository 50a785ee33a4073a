"""Central finite-difference gradient verification."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from reco.numcore.tensor import GradTape, Tensor


def numeric_gradient(f: Callable[[], float], params: Sequence[Tensor], h: float = 1e-4) -> list[np.ndarray]:
    """Central differences of ``f`` with respect to every entry of ``params``.

    ``f`` takes no arguments and reads the current parameter values; entries
    are perturbed in place and restored.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-3, atol: float = 1e-5) -> np.ndarray:
    """Per-entry ``|a - n| / max(|a|, |n|, atol / rtol)``.

    An entry passes at ``rtol`` exactly when it is within ``rtol`` relative or
    ``atol`` absolute error.
    """
    floor = atol / rtol
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-4,
    rtol: float = 1e-3,
    atol: float = 1e-5,
) -> float:
    """Worst relative error between tape gradients of ``f`` and central differences.

    ``f`` builds a scalar :class:`Tensor` from the current values of
    ``params``. Raises ``ValueError`` if two evaluations at the same point
    disagree.
    """
    for p in params:
        p.requires_grad = True
    with GradTape() as tape:
        loss = f()
    analytic = tape.gradient(loss, params)

    def value() -> float:
        return f().item()

    if value() != value():
        raise ValueError("objective is not deterministic; finite differences are meaningless")
    numeric = numeric_gradient(value, params, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            worst = max(worst, float(relative_error(a, n, rtol, atol).max()))
    return worst
