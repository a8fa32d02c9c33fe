"""Residual-shift diffusion process and a Gaussian DDPM baseline sampler.

Conventions: images are (C, H, W) float arrays normalized to [-1, 1];
the condition enters the chain twice, once lifted to the target channel
count as the shift endpoint and once verbatim as network input.  All
randomness comes from an explicit numpy Generator so every operation is
reproducible from (seed, call order).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .schedule import NoiseSchedule, loss_weight

# Denoiser interface: (x_t, condition, t) -> x0 estimate.  For the DDPM
# baseline the same signature predicts the step noise instead.
DenoiserFn = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


def _check_shapes(*arrays: np.ndarray) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def lift_condition(y0: np.ndarray, channels: int) -> np.ndarray:
    """Replicate a 1-channel condition across the target channel count."""
    if y0.shape[0] == channels:
        return y0
    if y0.shape[0] != 1:
        raise ValueError(f"cannot lift condition with {y0.shape[0]} channels to {channels}")
    return np.repeat(y0, channels, axis=0)


def forward_step(
    x_prev: np.ndarray, e0: np.ndarray, s: NoiseSchedule, t: int, rng: np.random.Generator
) -> np.ndarray:
    """One forward transition: x_t = x_{t-1} + alpha_t e0 + kappa sqrt(alpha_t) eps."""
    _check_shapes(x_prev, e0)
    if not 1 <= t <= s.T:
        raise ValueError(f"t must be in 1..{s.T}, got {t}")
    a = s.alpha[t]
    return x_prev + a * e0 + s.kappa * np.sqrt(a) * rng.standard_normal(x_prev.shape)


def forward_marginal(
    x0: np.ndarray, y0: np.ndarray, s: NoiseSchedule, t: int, rng: np.random.Generator
) -> np.ndarray:
    """Closed-form state at step t: x0 + eta_t (y0 - x0) + kappa sqrt(eta_t) eps.

    t = 0 returns x0 unchanged and consumes no randomness.
    """
    _check_shapes(x0, y0)
    if not 0 <= t <= s.T:
        raise ValueError(f"t must be in 0..{s.T}, got {t}")
    if t == 0:
        return x0.copy()
    e = s.eta[t]
    return x0 + e * (y0 - x0) + s.kappa * np.sqrt(e) * rng.standard_normal(x0.shape)


def posterior_step(
    x_t: np.ndarray,
    x0_hat: np.ndarray,
    s: NoiseSchedule,
    t: int,
    rng: np.random.Generator,
    noise_term: str = "variance",
) -> np.ndarray:
    """Reverse transition given an x0 estimate.

    Mean is the affine blend (eta_{t-1}/eta_t) x_t + (alpha_t/eta_t) x0_hat;
    the noise scale follows the variance reading of the posterior,
    sigma_t = kappa * sqrt(eta_{t-1} alpha_t / eta_t), which is the exact
    Markov-chain posterior of the forward process.  noise_term="literal"
    instead multiplies eps by kappa^2 (eta_{t-1}/eta_t) alpha_t, the
    printed-coefficient reading, kept only for comparison.

    At t = 1 (eta_0 = 0) the coefficients collapse to (0, 1, 0) and x0_hat
    is returned verbatim, making the terminal step deterministic.
    """
    _check_shapes(x_t, x0_hat)
    if not 1 <= t <= s.T:
        raise ValueError(f"t must be in 1..{s.T}, got {t}")
    if t == 1:
        return x0_hat.copy()
    ratio = s.eta[t - 1] / s.eta[t]
    coef_x0 = s.alpha[t] / s.eta[t]
    if noise_term == "variance":
        sigma = s.kappa * np.sqrt(ratio * s.alpha[t])
    elif noise_term == "literal":
        sigma = s.kappa**2 * ratio * s.alpha[t]
    else:
        raise ValueError(f"unknown noise_term {noise_term!r}")
    out = ratio * x_t + coef_x0 * x0_hat
    if sigma > 0:
        out = out + sigma * rng.standard_normal(x_t.shape)
    return out


def training_loss(
    f_out: np.ndarray, x0: np.ndarray, s: NoiseSchedule, t: int, weighting: bool = False
) -> float:
    """w_t * mean((f_out - x0)^2), with w_t = 1 when weighting is off."""
    _check_shapes(f_out, x0)
    w = loss_weight(s, t) if weighting else 1.0
    return float(w * np.mean((f_out - x0) ** 2))


@dataclass
class SampleTrace:
    """Instrumentation filled in by the samplers: denoiser call count and wall time."""

    model_calls: int = 0
    wall_seconds: float = 0.0
    steps: list[int] = field(default_factory=list)


def sample(
    y0: np.ndarray,
    model_fn: DenoiserFn,
    s: NoiseSchedule,
    rng: np.random.Generator,
    out_channels: int | None = None,
    clamp: tuple[float, float] = (-1.0, 1.0),
    trace: SampleTrace | None = None,
) -> np.ndarray:
    """Run the T-step reverse chain from the condition.

    Starts at x_T = y0 + kappa sqrt(eta_T) eps (the step-T marginal with the
    unknown x0 shifted out) and applies posterior_step with the model's x0
    estimate for t = T..1.  The result is clamped to the declared range.
    """
    t0 = time.perf_counter()
    if out_channels is None:
        out_channels = y0.shape[0]
    y_lift = lift_condition(y0, out_channels)
    x = y_lift + s.kappa * np.sqrt(s.eta[s.T]) * rng.standard_normal(y_lift.shape)
    for t in range(s.T, 0, -1):
        x0_hat = model_fn(x, y0, t)
        if trace is not None:
            trace.model_calls += 1
            trace.steps.append(t)
        x = posterior_step(x, x0_hat, s, t, rng)
    x = np.clip(x, clamp[0], clamp[1])
    if trace is not None:
        trace.wall_seconds += time.perf_counter() - t0
    return x


# --- Gaussian DDPM baseline (variance-preserving, amplitude convention) ---
#
# The per-step transition is x_t = a_t x_{t-1} + b_t eps with a_t^2 + b_t^2 = 1.
# These a_t/b_t are amplitudes, distinct from the residual schedule's
# alpha/eta which are shift fractions; the names alpha_ddpm/beta_ddpm keep
# the two vocabularies apart.


@dataclass(frozen=True)
class DdpmSchedule:
    alpha_ddpm: np.ndarray  # per-step signal amplitude, index 1..T (0 unused)
    beta_ddpm: np.ndarray  # per-step noise amplitude
    alpha_bar: np.ndarray  # cumulative product of alpha_ddpm, alpha_bar[0] = 1

    @property
    def T(self) -> int:
        return len(self.alpha_ddpm) - 1


def build_ddpm_schedule(
    T: int = 1000, beta_var_start: float = 1e-4, beta_var_end: float = 0.02
) -> DdpmSchedule:
    """Linear variance schedule; amplitudes derived so a_t^2 + b_t^2 = 1."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    beta_var = np.linspace(beta_var_start, beta_var_end, T)
    alpha = np.ones(T + 1, dtype=np.float64)
    beta = np.zeros(T + 1, dtype=np.float64)
    alpha[1:] = np.sqrt(1.0 - beta_var)
    beta[1:] = np.sqrt(beta_var)
    alpha_bar = np.cumprod(alpha)
    for a in (alpha, beta, alpha_bar):
        a.setflags(write=False)
    return DdpmSchedule(alpha_ddpm=alpha, beta_ddpm=beta, alpha_bar=alpha_bar)


def ddpm_forward(
    x0: np.ndarray, t: int, ds: DdpmSchedule, rng: np.random.Generator
) -> np.ndarray:
    """Cumulative closed form: x_t = abar_t x0 + sqrt(1 - abar_t^2) eps."""
    if not 0 <= t <= ds.T:
        raise ValueError(f"t must be in 0..{ds.T}, got {t}")
    if t == 0:
        return x0.copy()
    abar = ds.alpha_bar[t]
    return abar * x0 + np.sqrt(1.0 - abar * abar) * rng.standard_normal(x0.shape)


def ddpm_sample(
    y0: np.ndarray,
    eps_fn: DenoiserFn,
    ds: DdpmSchedule,
    rng: np.random.Generator,
    out_channels: int | None = None,
    clamp: tuple[float, float] = (-1.0, 1.0),
    trace: SampleTrace | None = None,
) -> np.ndarray:
    """Ancestral reverse chain with noise prediction.

    Each step inverts the single-step transition through the predicted
    noise, x_{t-1} = (x_t - b_t eps_hat) / a_t, adding b_t z for t > 1.
    Conditioning is by channel concatenation inside eps_fn.
    """
    t0 = time.perf_counter()
    if out_channels is None:
        out_channels = y0.shape[0]
    x = rng.standard_normal((out_channels,) + y0.shape[1:])
    for t in range(ds.T, 0, -1):
        eps_hat = eps_fn(x, y0, t)
        if trace is not None:
            trace.model_calls += 1
            trace.steps.append(t)
        x = (x - ds.beta_ddpm[t] * eps_hat) / ds.alpha_ddpm[t]
        if t > 1:
            x = x + ds.beta_ddpm[t] * rng.standard_normal(x.shape)
    x = np.clip(x, clamp[0], clamp[1])
    if trace is not None:
        trace.wall_seconds += time.perf_counter() - t0
    return x
