"""Reverse-diffusion fusion loop.

Starting from seeded unit noise, each step denoises, jumps to a clean-field
estimate, corrects that estimate against the sources, and takes one
posterior step down the chain.  The final step (t = 0) has no further
transition: the corrected estimate is the output, matching the zero
final-step variance convention.  The whole run is a pure function of
(sources, weights, config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser import DenoiserParams, denoise
from .em import EMConfig, EMState, GradientOperator, SourceStack, em_correct, make_stack
from .imageio import crop_to, pad_to_multiple
from .schedule import NoiseSchedule, estimate_f0, posterior_step

TRACE_HEADER = "t,f_tilde_norm,f_hat_norm,gamma,rho,objective"


@dataclass
class FusionRun:
    """Everything a fusion needs; `trace` fills with per-step rows if kept."""

    stack: SourceStack
    sched: NoiseSchedule
    params: DenoiserParams
    em_cfg: EMConfig
    seed: int
    keep_trace: bool = False
    trace: list[tuple] = field(default_factory=list)


def fuse(run: FusionRun) -> np.ndarray:
    """Fuse the sources; returns a [-1, 1] float64 field at the source extent.

    Sources are reflect-padded to the patch grid for the duration of the
    run and the result is cropped back.  Bit-reproducible for a fixed run.
    """
    p = run.params.cfg.patch
    img1, extent = pad_to_multiple(run.stack.img1, p)
    img2, _ = pad_to_multiple(run.stack.img2, p)
    img3, _ = pad_to_multiple(run.stack.img3, p)
    stack = SourceStack(img1, img2, img3, run.stack.n_modal)

    rng = np.random.default_rng(run.seed)
    f = rng.standard_normal(stack.shape)
    op = GradientOperator(stack.shape)
    state: EMState | None = None
    run.trace.clear()
    for t in range(run.sched.T - 1, -1, -1):
        eps_hat = denoise(f.astype(np.float32), t, run.params).astype(np.float64)
        f_tilde = estimate_f0(f, eps_hat, t, run.sched)
        f_hat, state = em_correct(f_tilde, stack, run.em_cfg, state, op)
        if t > 0:
            z = rng.standard_normal(stack.shape)
            f = posterior_step(f, f_hat, t, run.sched, z)
        else:
            f = f_hat
        if not np.all(np.isfinite(f)):
            raise RuntimeError(f"fusion produced non-finite values at step t={t}")
        if run.keep_trace:
            run.trace.append(
                (
                    t,
                    float(np.linalg.norm(f_tilde)),
                    float(np.linalg.norm(f_hat)),
                    state.gamma,
                    state.rho,
                    state.objective,
                )
            )
    return np.clip(crop_to(f, extent), -1.0, 1.0)


def fuse_fields(
    fields: list[np.ndarray],
    params: DenoiserParams,
    sched: NoiseSchedule,
    em_cfg: EMConfig,
    seed: int,
    keep_trace: bool = False,
) -> tuple[np.ndarray, list[tuple]]:
    """Convenience wrapper: build the stack and run one fusion."""
    run = FusionRun(make_stack(fields), sched, params, em_cfg, seed, keep_trace)
    fused = fuse(run)
    return fused, run.trace


def unconditional_sample(
    params: DenoiserParams,
    sched: NoiseSchedule,
    shape: tuple[int, int],
    seed: int,
) -> np.ndarray:
    """Sample the prior alone: the same loop with the correction disabled."""
    p = params.cfg.patch
    if shape[0] % p or shape[1] % p:
        raise ValueError(f"sample extent {shape} not a multiple of patch {p}")
    rng = np.random.default_rng(seed)
    f = rng.standard_normal(shape)
    for t in range(sched.T - 1, -1, -1):
        eps_hat = denoise(f.astype(np.float32), t, params).astype(np.float64)
        f_hat = estimate_f0(f, eps_hat, t, sched)
        if t > 0:
            z = rng.standard_normal(shape)
            f = posterior_step(f, f_hat, t, sched, z)
        else:
            f = f_hat
    return np.clip(f, -1.0, 1.0)


def write_trace(rows: list[tuple], path: str) -> None:
    with open(path, "w") as fh:
        fh.write(TRACE_HEADER + "\n")
        for t, ftn, fhn, gamma, rho, obj in rows:
            fh.write(f"{t},{ftn:.8g},{fhn:.8g},{gamma:.8g},{rho:.8g},{obj:.8g}\n")
