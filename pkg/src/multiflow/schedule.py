"""Noise schedules and the closed-form forward / posterior diffusion math.

The forward process scales signal by sqrt(alpha_bar_t) and injects
sqrt(1 - alpha_bar_t) noise, so unit-variance inputs stay unit variance at
every step. The reverse-step mean removes the predicted noise and rescales;
the reverse-step variance is beta_t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, ShapeError, as_tensor, add, mul


class ScheduleError(ValueError):
    """Invalid schedule parameters or step index."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta / alpha / alpha_bar tables, 1-indexed by timestep t."""

    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ScheduleError(f"beta must be a 1-D table, got shape {beta.shape}")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ScheduleError("beta entries must lie strictly inside (0, 1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", 1.0 - beta)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - beta))

    @property
    def T(self) -> int:
        return self.beta.size

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [1, {self.T}]")
        return t

    def abar(self, t: int) -> float:
        """alpha_bar at step t, with the t=0 convention alpha_bar = 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[self._check_t(t) - 1])


def linear_betas(T: int, beta0: float, betaT: float) -> NoiseSchedule:
    """Evenly interpolated beta table from beta0 (t=1) to betaT (t=T)."""
    T = int(T)
    if T < 1:
        raise ScheduleError(f"need T >= 1, got {T}")
    if not (0.0 < beta0 <= betaT < 1.0):
        raise ScheduleError(f"need 0 < beta0 <= betaT < 1, got {beta0}, {betaT}")
    if T == 1:
        return NoiseSchedule(np.array([beta0]))
    t = np.arange(T, dtype=np.float64)
    return NoiseSchedule(beta0 + t / (T - 1) * (betaT - beta0))


def scaled_linear_betas(T: int, beta0: float, betaT: float) -> NoiseSchedule:
    """Linear interpolation in sqrt(beta) space (the Stable Diffusion variant)."""
    T = int(T)
    if T < 1:
        raise ScheduleError(f"need T >= 1, got {T}")
    if not (0.0 < beta0 <= betaT < 1.0):
        raise ScheduleError(f"need 0 < beta0 <= betaT < 1, got {beta0}, {betaT}")
    if T == 1:
        return NoiseSchedule(np.array([beta0]))
    t = np.arange(T, dtype=np.float64)
    root = np.sqrt(beta0) + t / (T - 1) * (np.sqrt(betaT) - np.sqrt(beta0))
    return NoiseSchedule(root * root)


def make_schedule(kind: str, T: int, beta0: float, betaT: float) -> NoiseSchedule:
    if kind == "linear":
        return linear_betas(T, beta0, betaT)
    if kind == "scaled_linear":
        return scaled_linear_betas(T, beta0, betaT)
    raise ScheduleError(f"unknown schedule kind {kind!r}")


def _coeff(value: float, shape) -> np.ndarray:
    return np.full(shape, value)


def forward_diffuse(z0: Tensor, t, eps: Tensor, s: NoiseSchedule) -> Tensor:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    t may be an int (shared step) or an int array with one step per leading
    batch row of z0.
    """
    z0, eps = as_tensor(z0), as_tensor(eps)
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 shape {z0.shape} != eps shape {eps.shape}")
    if np.ndim(t) == 0:
        ab = s.abar(int(t))
        a = _coeff(np.sqrt(ab), z0.shape)
        b = _coeff(np.sqrt(1.0 - ab), z0.shape)
    else:
        ts = np.asarray(t, dtype=np.int64)
        if ts.shape != (z0.shape[0],):
            raise ShapeError(f"per-sample t shape {ts.shape} != batch ({z0.shape[0]},)")
        ab = np.array([s.abar(int(x)) for x in ts])
        tail = (1,) * (z0.ndim - 1)
        a = np.broadcast_to(np.sqrt(ab).reshape(-1, *tail), z0.shape)
        b = np.broadcast_to(np.sqrt(1.0 - ab).reshape(-1, *tail), z0.shape)
    return add(mul(z0, Tensor(a)), mul(eps, Tensor(b)))


def posterior_mean(z_t: Tensor, eps_hat: Tensor, t: int, s: NoiseSchedule) -> Tensor:
    """Reverse-step mean (1/sqrt(alpha_t)) (z_t - beta_t/sqrt(1-abar_t) eps_hat)."""
    z_t, eps_hat = as_tensor(z_t), as_tensor(eps_hat)
    if z_t.shape != eps_hat.shape:
        raise ShapeError(f"z_t shape {z_t.shape} != eps_hat shape {eps_hat.shape}")
    t = s._check_t(t)
    beta = float(s.beta[t - 1])
    alpha = float(s.alpha[t - 1])
    abar = float(s.alpha_bar[t - 1])
    k_eps = beta / np.sqrt(1.0 - abar)
    inv = 1.0 / np.sqrt(alpha)
    scaled = add(z_t, mul(eps_hat, Tensor(_coeff(-k_eps, z_t.shape))))
    return mul(scaled, Tensor(_coeff(inv, z_t.shape)))


def reverse_variance(t: int, s: NoiseSchedule) -> float:
    """Variance of the reverse step at t (beta_t)."""
    return float(s.beta[s._check_t(t) - 1])


def snr(t: int, s: NoiseSchedule) -> float:
    """Signal-to-noise ratio abar_t / (1 - abar_t)."""
    ab = float(s.alpha_bar[s._check_t(t) - 1])
    return ab / (1.0 - ab)
