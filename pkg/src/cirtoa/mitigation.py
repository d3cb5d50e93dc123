"""ToA error mitigation, the constant-bias benchmark and range conversion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cir import SPEED_OF_LIGHT
from .errors import ParameterError


@dataclass(frozen=True)
class BiasModel:
    """Constant ToA error (in samples) of one conventional estimator."""

    bias: float
    method: str
    n_train: int

    def __post_init__(self):
        if self.n_train < 1:
            raise ParameterError("BiasModel needs n_train >= 1")
        if not math.isfinite(self.bias):
            raise ParameterError("bias must be finite")

    def apply(self, toa_conventional):
        return mitigate(toa_conventional, self.bias)


def mitigate(toa_conventional, eps_hat):
    """Subtract an estimated ToA error from a conventional estimate."""
    return toa_conventional - eps_hat


def fit_cnst_avg(train_errors: Sequence[float], method: str = "") -> BiasModel:
    errors = np.asarray(train_errors, dtype=np.float64).reshape(-1)
    if errors.size == 0:
        raise ParameterError("fit_cnst_avg needs at least one training error")
    if not np.all(np.isfinite(errors)):
        raise ParameterError("training errors must be finite")
    return BiasModel(math.fsum(errors.tolist()) / errors.size, method, int(errors.size))


def range_from_toa(toa, tot=0.0, delta_t: float = 1.0):
    """Range in metres for a ToA/ToT pair given in sample indices."""
    delta_t = np.asarray(delta_t, float)
    if not np.all(delta_t > 0):
        raise ParameterError(f"delta_t must be positive, got {delta_t}")
    r = SPEED_OF_LIGHT * (np.asarray(toa, float) - np.asarray(tot, float)) * delta_t
    return float(r) if r.ndim == 0 else r


def abs_ranging_error(r_hat, r_true):
    e = np.abs(np.asarray(r_hat, float) - np.asarray(r_true, float))
    return float(e) if e.ndim == 0 else e
