"""Discrete diffusion noise schedule and the three chain operations.

The schedule is the standard variance-preserving discrete chain: per-step
noise rates beta_t, signal rates alpha_t = 1 - beta_t, cumulative products
alpha_bar_t, and the clipped posterior standard deviations sigma_tilde_t
(zero at t = 0 by convention, so the final step is deterministic).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BETA_START = 1e-4
BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed per-step rates for a T-step chain (float64 arrays)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma_tilde: np.ndarray


def make_schedule(kind: str = "linear", T: int = 100) -> NoiseSchedule:
    """Build a schedule. `kind` currently admits only "linear".

    Linear spacing runs beta from 1e-4 to 0.02 inclusive over T steps.
    """
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if T < 2:
        raise ValueError(f"schedule needs at least 2 steps, got {T}")
    beta = np.linspace(BETA_START, BETA_END, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    # sigma_tilde_t^2 = beta_t * (1 - abar_{t-1}) / (1 - abar_t); zero at t=0.
    sigma2 = np.zeros(T, dtype=np.float64)
    sigma2[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    sched = NoiseSchedule(T, beta, alpha, alpha_bar, np.sqrt(sigma2))
    _validate(sched)
    return sched


def _validate(s: NoiseSchedule) -> None:
    if not (np.all(np.isfinite(s.beta)) and np.all(np.isfinite(s.alpha_bar))):
        raise ValueError("schedule arrays must be finite")
    if np.any(s.beta <= 0.0) or np.any(s.beta >= 1.0):
        raise ValueError("beta must lie strictly inside (0, 1)")
    if np.any(np.diff(s.beta) < 0.0):
        raise ValueError("beta must be non-decreasing")
    if np.any(np.diff(s.alpha_bar) >= 0.0):
        raise ValueError("alpha_bar must be strictly decreasing")


def _check_t(s: NoiseSchedule, t: int, lo: int = 0) -> None:
    if not lo <= t < s.T:
        raise ValueError(f"timestep {t} outside [{lo}, {s.T})")


def forward_perturb(f0: np.ndarray, t: int, sched: NoiseSchedule, z: np.ndarray) -> np.ndarray:
    """Jump the clean field straight to noise level t given unit noise z."""
    _check_t(sched, t)
    if z.shape != f0.shape:
        raise ValueError(f"noise shape {z.shape} != field shape {f0.shape}")
    ab = sched.alpha_bar[t]
    return float(np.sqrt(ab)) * f0 + float(np.sqrt(1.0 - ab)) * z


def estimate_f0(f_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Invert the forward jump using a noise estimate (exact for true noise)."""
    _check_t(sched, t)
    ab = sched.alpha_bar[t]
    return (f_t - float(np.sqrt(1.0 - ab)) * eps_hat) / float(np.sqrt(ab))


def posterior_step(
    f_t: np.ndarray, f0_hat: np.ndarray, t: int, sched: NoiseSchedule, z: np.ndarray
) -> np.ndarray:
    """One reverse step t -> t-1 from the clean-field estimate.

    The mean mixes f_t and f0_hat with the usual posterior coefficients;
    sigma_tilde_t scales the injected noise z.  t = 0 has no further step
    and is an error here (the sampler returns f0_hat directly there).
    """
    _check_t(sched, t, lo=1)
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    coef_ft = float(np.sqrt(sched.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab_t))
    coef_f0 = float(np.sqrt(ab_prev) * sched.beta[t] / (1.0 - ab_t))
    return coef_ft * f_t + coef_f0 * f0_hat + float(sched.sigma_tilde[t]) * z
