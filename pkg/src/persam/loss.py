"""Training objective: cross-entropy on the class probabilities plus a
noisy-OR bag-level binary cross-entropy on the explanatory attentions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import tensor as T
from .autodiff.tensor import Tensor

LOG_EPS = 1e-12


@dataclass
class LossConfig:
    clamp_lo: float = 0.95
    clamp_mode: str = "affine"  # "affine": 0.95 + 0.05 x; "floor": max(x, 0.95)
    smooth_pos: float = 0.95
    smooth_neg: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.clamp_lo < 1.0:
            raise ValueError(f"clamp_lo must lie in (0, 1), got {self.clamp_lo}")
        if self.clamp_mode not in ("affine", "floor"):
            raise ValueError(f"unknown clamp_mode {self.clamp_mode!r}")

    def smoothed(self, label: int, n_classes: int) -> np.ndarray:
        y = np.full(n_classes, self.smooth_neg)
        y[label] = self.smooth_pos
        return y


def _safe_log(x: Tensor) -> Tensor:
    return T.log(T.maximum(x, LOG_EPS))


def cross_entropy(y_hat: Tensor, Y) -> Tensor:
    """-sum_c Y_c log y_hat_c for a one-hot (or soft) target ``Y``."""
    return -T.tsum(T.mul(_safe_log(y_hat), T.as_tensor(np.asarray(Y, dtype=np.float64))))


def noisy_or(a_prime: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """pi_c = 1 - prod_l g(1 - a'[l, c]) for every column ``c``.

    ``g`` maps each factor into ``[clamp_lo, 1]`` so the product cannot
    underflow; the product is accumulated as a sum of logs. A 1-D input is
    treated as a single class column and gives a scalar.
    """
    single = a_prime.ndim == 1
    if single:
        a_prime = a_prime.reshape(a_prime.shape[0], 1)
    # log g(1 - a') written as log1p(...) and 1 - exp(s) as -expm1(s): both
    # stay accurate when pi is close to zero
    if cfg.clamp_mode == "affine":
        log_factors = T.log1p(-(1.0 - cfg.clamp_lo) * a_prime)
    else:
        log_factors = T.log1p(T.maximum(-a_prime, cfg.clamp_lo - 1.0))
    log_prod = T.tsum(log_factors, axis=0)
    pi = -T.expm1(log_prod)
    return pi.reshape(()) if single else pi


def bce(pi: Tensor, y) -> Tensor:
    """Elementwise -[y log pi + (1 - y) log(1 - pi)] with clamped logs."""
    pi = T.as_tensor(pi)
    y = T.as_tensor(np.asarray(y, dtype=np.float64))
    log_comp = T.log1p(T.maximum(-pi, LOG_EPS - 1.0))
    return -(y * _safe_log(pi) + (1.0 - y) * log_comp)


def total_loss(y_hat: Tensor, label: int, pi: Tensor, cfg: LossConfig = LossConfig(),
               ce_weight: float = 1.0) -> Tensor:
    """Per-bag loss: CE(hard one-hot) + (1/C) sum_c BCE(smoothed label, pi_c)."""
    C = y_hat.shape[0]
    Y = np.zeros(C)
    Y[label] = 1.0
    ce = cross_entropy(y_hat, Y)
    if ce_weight != 1.0:
        ce = ce * ce_weight
    return ce + T.mean(bce(pi, cfg.smoothed(label, C)))
