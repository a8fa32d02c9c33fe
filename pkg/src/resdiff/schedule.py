"""Exponential residual-shifting schedule.

The forward chain injects a growing fraction eta_t of the condition/target
residual, plus Gaussian noise of per-step scale kappa*sqrt(alpha_t) where
alpha_t = eta_t - eta_{t-1}.  sqrt(eta_t) follows a geometric progression
warped by an exponent p:

    sqrt(eta_t) = sqrt(eta_1) * b0**beta_t,   t = 2..T-1
    beta_t      = ((t-1)/(T-1))**p * (T-1)
    b0          = exp(log(eta_T/eta_1) / (2*(T-1)))

Endpoints are pinned to eta_1 and eta_T exactly; eta_0 is defined as 0 so
the final reverse step is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 15
    p: float = 0.3
    kappa: float = 2.0
    eta_1: float = 1e-4
    eta_T: float = 0.9999

    def validate(self) -> None:
        if not isinstance(self.T, int) or self.T < 2:
            raise ValueError(f"T must be an integer >= 2, got {self.T!r}")
        for name in ("p", "kappa", "eta_1", "eta_T"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v!r}")
        if self.p <= 0:
            raise ValueError(f"p must be > 0, got {self.p}")
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        if not (0.0 < self.eta_1 < self.eta_T <= 1.0):
            raise ValueError(
                f"need 0 < eta_1 < eta_T <= 1, got eta_1={self.eta_1}, eta_T={self.eta_T}"
            )


@dataclass(frozen=True)
class NoiseSchedule:
    """Shifting sequence eta[0..T] (eta[0] = 0) and increments alpha[1..T]."""

    config: ScheduleConfig
    eta: np.ndarray
    alpha: np.ndarray

    @property
    def T(self) -> int:
        return self.config.T

    @property
    def kappa(self) -> float:
        return self.config.kappa


def build_schedule(cfg: ScheduleConfig) -> NoiseSchedule:
    """Build the shifting sequence and its first differences.

    Raises ValueError on invalid configs (T < 2, non-positive p,
    eta_1 >= eta_T, non-finite values).
    """
    cfg.validate()
    T = cfg.T
    eta = np.zeros(T + 1, dtype=np.float64)
    eta[1] = cfg.eta_1
    eta[T] = cfg.eta_T
    b0 = math.exp(math.log(cfg.eta_T / cfg.eta_1) / (2.0 * (T - 1)))
    sqrt_eta1 = math.sqrt(cfg.eta_1)
    for t in range(2, T):
        beta_t = ((t - 1) / (T - 1)) ** cfg.p * (T - 1)
        s = sqrt_eta1 * b0**beta_t
        eta[t] = s * s
    alpha = np.zeros(T + 1, dtype=np.float64)
    alpha[1:] = np.diff(eta)
    if not np.all(alpha[1:] > 0):
        raise ValueError("schedule is not strictly increasing; check T/p/eta endpoints")
    eta.setflags(write=False)
    alpha.setflags(write=False)
    return NoiseSchedule(config=cfg, eta=eta, alpha=alpha)


def loss_weight(s: NoiseSchedule, t: int, t1_fallback: float = 1.0, uniform: bool = False) -> float:
    """Per-step loss weight alpha_t / (2 kappa^2 eta_t eta_{t-1}).

    The weight diverges at t=1 because eta_0 = 0; a configurable fallback
    (default 1.0) is returned there instead.  With uniform=True every step
    gets weight 1 (schedule weighting disabled entirely).
    """
    if not 1 <= t <= s.T:
        raise ValueError(f"t must be in 1..{s.T}, got {t}")
    if uniform:
        return 1.0
    if t == 1:
        return t1_fallback
    k = s.kappa
    if k == 0.0:
        raise ValueError("loss weight is undefined for kappa = 0; use uniform weighting")
    return float(s.alpha[t] / (2.0 * k * k * s.eta[t] * s.eta[t - 1]))


def schedule_rows(s: NoiseSchedule, t1_fallback: float = 1.0) -> list[tuple[int, float, float, float]]:
    """Rows (t, eta, alpha, loss_weight) for t = 1..T, as dumped by the CLI."""
    uniform = s.kappa == 0.0
    return [
        (t, float(s.eta[t]), float(s.alpha[t]), loss_weight(s, t, t1_fallback, uniform=uniform))
        for t in range(1, s.T + 1)
    ]
