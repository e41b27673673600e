"""Likelihood correction of the sampled field by EM with quadratic splitting.

At each reverse-diffusion step the clean-field estimate is corrected
toward the measured sources.  With substitutions x = f - img2 - img3 and
y = img1 - img2 the correction solves a hierarchical-Laplacian least
squares problem:

    min_x  || m (x - y) ||^2 + || n x ||^2
         + psi ||u||^2 + (eta / 2) ( ||u - grad k||^2 + ||k - x||^2 )

The E-step refreshes the latent weights m, n from the current residuals
and the scale hyperparameters gamma (for y - x) and rho (for x); the
M-step alternates exact coordinate minimizers for k (a periodic FFT
solve), u (pointwise shrinkage of grad k) and x (a pointwise ratio).
gamma and rho are re-estimated from the same weights afterwards and carry
across diffusion steps.

Everything here runs in float64: the solves are compared against dense
oracles at 1e-8/1e-10 tolerances, which 32-bit arithmetic cannot hold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EXPECTATION_FORMS = ("algorithm1", "equation20")
_RESIDUE_LIMIT = 1e-6
_WEIGHT_FLOOR = 1e-6
_SCALE_MIN, _SCALE_MAX = 1e-6, 1e6


class ResidueError(RuntimeError):
    """FFT solve returned a non-trivially complex field (corrupt operator)."""


@dataclass(frozen=True)
class EMConfig:
    """Correction hyperparameters.

    `phi` is recorded for completeness but never read: the prior weight it
    would scale is absorbed into the adaptive scales gamma and rho.
    `expectation_form` selects between the two published weight updates:
    "algorithm1" (square-root residual form) or "equation20" (squared
    residual form); both leave the n-weight untouched.
    """

    eta: float = 0.1
    psi: float = 0.5
    phi: float = 0.5
    gamma0: float = 1.0
    rho0: float = 1.0
    inner_sweeps: int = 1
    expectation_form: str = "algorithm1"

    def __post_init__(self):
        if self.eta <= 0.0 or self.psi <= 0.0:
            raise ValueError("eta and psi must be positive")
        if self.gamma0 <= 0.0 or self.rho0 <= 0.0:
            raise ValueError("gamma0 and rho0 must be positive")
        if self.inner_sweeps < 1:
            raise ValueError("inner_sweeps must be at least 1")
        if self.expectation_form not in _EXPECTATION_FORMS:
            raise ValueError(
                f"expectation_form must be one of {_EXPECTATION_FORMS}, "
                f"got {self.expectation_form!r}"
            )


@dataclass
class SourceStack:
    """Two or three co-registered sources as [-1, 1] float64 fields.

    A missing third source is stored as an explicit zero field so the
    two-source and three-source paths execute identical arithmetic.
    """

    img1: np.ndarray
    img2: np.ndarray
    img3: np.ndarray
    n_modal: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.img1.shape


def make_stack(fields: list[np.ndarray]) -> SourceStack:
    if len(fields) not in (2, 3):
        raise ValueError(f"fusion takes 2 or 3 sources, got {len(fields)}")
    arrs = [np.asarray(f, dtype=np.float64) for f in fields]
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1:
        raise ValueError(f"sources disagree on extent: {sorted(shapes)}")
    if arrs[0].ndim != 2:
        raise ValueError("sources must be single-channel 2-d fields")
    img3 = arrs[2] if len(arrs) == 3 else np.zeros_like(arrs[0])
    return SourceStack(arrs[0], arrs[1], img3, n_modal=len(fields))


@dataclass
class EMState:
    """Correction state carried across diffusion steps."""

    x: np.ndarray
    y: np.ndarray
    k: np.ndarray
    u: tuple[np.ndarray, np.ndarray]
    m: np.ndarray
    n: np.ndarray
    gamma: float
    rho: float
    objective: float = field(default=float("nan"))


class GradientOperator:
    """Forward-difference gradient with periodic wrap, plus its FFT caches.

    The horizontal/vertical kernels act as circular convolutions, so the
    normal-equation solve in k_update diagonalizes in Fourier space.  The
    cached transfer functions (`f_h`, `f_v`) and denominator (`denom`) are
    plain attributes so a self-test can corrupt them deliberately.
    """

    def __init__(self, shape: tuple[int, int]):
        if len(shape) != 2:
            raise ValueError(f"expected a 2-d extent, got {shape}")
        self.shape = shape
        h, w = shape
        kern_h = np.zeros(shape, dtype=np.float64)
        kern_h[0, 0] = -1.0
        kern_h[0, w - 1] = 1.0
        kern_v = np.zeros(shape, dtype=np.float64)
        kern_v[0, 0] = -1.0
        kern_v[h - 1, 0] = 1.0
        self.f_h = np.fft.fft2(kern_h)
        self.f_v = np.fft.fft2(kern_v)
        self.denom = 1.0 + np.abs(self.f_h) ** 2 + np.abs(self.f_v) ** 2

    def apply(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(grad_h x, grad_v x): wrapped forward differences."""
        gh = np.roll(x, -1, axis=1) - x
        gv = np.roll(x, -1, axis=0) - x
        return gh, gv

    def adjoint(self, uh: np.ndarray, uv: np.ndarray) -> np.ndarray:
        """Adjoint of apply; adjoint(apply(x)) is the periodic Laplacian."""
        ah = np.roll(uh, 1, axis=1) - uh
        av = np.roll(uv, 1, axis=0) - uv
        return ah + av


def build_substitution(
    f_tilde: np.ndarray, stack: SourceStack
) -> tuple[np.ndarray, np.ndarray]:
    """Shift into the residual frame: x0 = f - img2 - img3, y = img1 - img2."""
    f_tilde = np.asarray(f_tilde, dtype=np.float64)
    if f_tilde.shape != stack.shape:
        raise ValueError(f"field {f_tilde.shape} != sources {stack.shape}")
    x0 = f_tilde - stack.img2 - stack.img3
    y = stack.img1 - stack.img2
    return x0, y


def e_step(
    x: np.ndarray, y: np.ndarray, gamma: float, rho: float, form: str = "algorithm1"
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Latent Laplace weights from the current residuals.

    Returns (m, n, m_tilde, n_tilde) where m = sqrt(m_tilde) and
    n = sqrt(n_tilde).  The data weight m_tilde is sqrt(2) |y - x| /
    sqrt(gamma) in the "algorithm1" form and 2 (y - x)^2 / gamma in the
    "equation20" form; the prior weight n_tilde is sqrt(2) |x| /
    sqrt(rho) in both.
    """
    if form not in _EXPECTATION_FORMS:
        raise ValueError(f"unknown expectation form {form!r}")
    if gamma <= 0.0 or rho <= 0.0:
        raise ValueError("gamma and rho must be positive")
    r = y - x
    if form == "algorithm1":
        m_tilde = np.sqrt(2.0) * np.abs(r) / np.sqrt(gamma)
    else:
        m_tilde = 2.0 * r * r / gamma
    n_tilde = np.sqrt(2.0) * np.abs(x) / np.sqrt(rho)
    return np.sqrt(m_tilde), np.sqrt(n_tilde), m_tilde, n_tilde


def k_update(
    x: np.ndarray, uh: np.ndarray, uv: np.ndarray, op: GradientOperator
) -> np.ndarray:
    """Exact minimizer of ||u - grad k||^2 + ||k - x||^2 (periodic wrap).

    Solved in one shot in Fourier space where the normal equations are
    diagonal.  The inverse transform must be essentially real; a larger
    imaginary residue means the operator caches are corrupt.
    """
    num = (
        np.fft.fft2(x)
        + np.conj(op.f_h) * np.fft.fft2(uh)
        + np.conj(op.f_v) * np.fft.fft2(uv)
    )
    k = np.fft.ifft2(num / op.denom)
    residue = float(np.abs(k.imag).max())
    if residue >= _RESIDUE_LIMIT:
        raise ResidueError(
            f"imaginary residue {residue:.3e} exceeds {_RESIDUE_LIMIT:.0e}; "
            "gradient-operator caches look corrupt"
        )
    return k.real


def u_update(k: np.ndarray, op: GradientOperator, cfg: EMConfig) -> tuple[np.ndarray, np.ndarray]:
    """Exact minimizer of psi ||u||^2 + (eta/2) ||u - grad k||^2: a shrink."""
    gh, gv = op.apply(k)
    shrink = cfg.eta / (2.0 * cfg.psi + cfg.eta)
    return shrink * gh, shrink * gv


def x_update(
    y: np.ndarray, k: np.ndarray, m: np.ndarray, n: np.ndarray, cfg: EMConfig
) -> np.ndarray:
    """Exact pointwise minimizer of the x terms of the objective."""
    m2 = m * m
    n2 = n * n
    return (2.0 * m2 * y + cfg.eta * k) / (2.0 * m2 + 2.0 * n2 + cfg.eta)


def update_hyperparams(
    m_tilde: np.ndarray, n_tilde: np.ndarray
) -> tuple[float, float]:
    """Re-estimate the Laplace scales from the latent weights.

    The expected inverse weight is approximated by 1/max(w, floor); the
    scale is its pixel mean, clamped to [1e-6, 1e6].
    """
    gamma = float(np.mean(1.0 / np.maximum(m_tilde, _WEIGHT_FLOOR)))
    rho = float(np.mean(1.0 / np.maximum(n_tilde, _WEIGHT_FLOOR)))
    return (
        float(np.clip(gamma, _SCALE_MIN, _SCALE_MAX)),
        float(np.clip(rho, _SCALE_MIN, _SCALE_MAX)),
    )


def hqs_objective(
    x: np.ndarray,
    y: np.ndarray,
    k: np.ndarray,
    u: tuple[np.ndarray, np.ndarray],
    m: np.ndarray,
    n: np.ndarray,
    cfg: EMConfig,
    op: GradientOperator,
) -> float:
    """The split objective; each M-step sub-update may never increase it."""
    uh, uv = u
    gh, gv = op.apply(k)
    val = float(np.sum((m * (x - y)) ** 2))
    val += float(np.sum((n * x) ** 2))
    val += cfg.psi * float(np.sum(uh**2) + np.sum(uv**2))
    val += (cfg.eta / 2.0) * float(np.sum((uh - gh) ** 2) + np.sum((uv - gv) ** 2))
    val += (cfg.eta / 2.0) * float(np.sum((k - x) ** 2))
    return val


def em_correct(
    f_tilde: np.ndarray,
    stack: SourceStack,
    cfg: EMConfig,
    state: EMState | None = None,
    op: GradientOperator | None = None,
) -> tuple[np.ndarray, EMState]:
    """One correction pass on the clean-field estimate.

    Order: substitution, one E-step, `inner_sweeps` rounds of the exact
    coordinate minimizers (k, u, x), then the scale re-estimate.  k and u
    restart from the incoming x0 each call; gamma and rho persist via
    `state`.  Returns the corrected field x + img2 + img3 and the new state.
    """
    if op is None:
        op = GradientOperator(stack.shape)
    elif op.shape != stack.shape:
        raise ValueError(f"operator built for {op.shape}, sources are {stack.shape}")
    gamma = state.gamma if state is not None else cfg.gamma0
    rho = state.rho if state is not None else cfg.rho0

    x0, y = build_substitution(f_tilde, stack)
    m, n, m_tilde, n_tilde = e_step(x0, y, gamma, rho, cfg.expectation_form)
    x = x0
    k = x0.copy()
    uh, uv = op.apply(x0)
    for _ in range(cfg.inner_sweeps):
        k = k_update(x, uh, uv, op)
        uh, uv = u_update(k, op, cfg)
        x = x_update(y, k, m, n, cfg)
    gamma, rho = update_hyperparams(m_tilde, n_tilde)
    objective = hqs_objective(x, y, k, (uh, uv), m, n, cfg, op)
    f_hat = x + stack.img2 + stack.img3
    new_state = EMState(x, y, k, (uh, uv), m, n, gamma, rho, objective)
    return f_hat, new_state
