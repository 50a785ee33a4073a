"""Bidirectional InfoNCE with a learned temperature, and the three-term objective."""
from __future__ import annotations

import math

import numpy as np

from reco.numcore import Tensor, add, clamped_exp, matmul, paired_nce, scale, scale_by, transpose

MAX_INV_TAU = 100.0
INIT_TAU = 0.07


class TemperatureParam:
    """Learnable ``log(1/tau)``; the effective ``1/tau`` is capped at 100."""

    def __init__(self, log_inv_tau: float = math.log(1.0 / INIT_TAU)):
        self.log_inv_tau = Tensor(np.array(log_inv_tau), name="temperature.log_inv_tau")

    @classmethod
    def from_tau(cls, tau: float) -> "TemperatureParam":
        return cls(math.log(1.0 / tau))

    def inv_tau(self) -> Tensor:
        return clamped_exp(self.log_inv_tau, MAX_INV_TAU)

    @property
    def value(self) -> float:
        return min(math.exp(float(self.log_inv_tau.data)), MAX_INV_TAU)

    def copy(self) -> "TemperatureParam":
        return TemperatureParam(float(self.log_inv_tau.data))


def info_nce(V, T, temp: TemperatureParam, reduction: str = "sum") -> Tensor:
    """Symmetric contrastive loss between aligned rows of ``V`` and ``T``.

    Summed over the batch and over both softmax directions; ``reduction="mean"``
    divides by the batch size.
    """
    V = V if isinstance(V, Tensor) else Tensor(V)
    T = T if isinstance(T, Tensor) else Tensor(T)
    loss = paired_nce(scale_by(matmul(V, transpose(T)), temp.inv_tau()))
    if reduction == "mean":
        return scale(loss, 1.0 / V.shape[0])
    if reduction != "sum":
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    return loss


def total_loss(V, T, V_bar, T_bar, temp: TemperatureParam, reduction: str = "sum"):
    """Refined/refined plus both refined/original cross terms.

    Returns ``(loss, [refined-refined, refined-image vs text, image vs refined-text])``.
    There is deliberately no original/original term: both originals are frozen.
    """
    if V_bar is None or T_bar is None:
        raise ValueError("total_loss needs both refined matrices")
    terms = [
        info_nce(V_bar, T_bar, temp, reduction),
        info_nce(V_bar, T, temp, reduction),
        info_nce(V, T_bar, temp, reduction),
    ]
    return add(add(terms[0], terms[1]), terms[2]), terms
