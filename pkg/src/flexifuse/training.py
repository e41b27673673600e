"""Denoiser training: score-matching loss, Adam, and the gradient registry.

Training minimizes the plain noise-prediction objective: draw a timestep
uniformly, perturb the clean field with the forward chain, and regress the
network output onto the injected unit noise with mean squared error.  The
fusion-time correction never enters training.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import denoiser
from .denoiser import DenoiserParams, PatchConfig
from .imageio import load_image, normalize
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 8
    steps: int = 2000
    clip: float = 1.0
    seed: int = 0


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def synthetic_corpus(count: int, size: int = 16, seed: int = 0) -> np.ndarray:
    """Deterministic toy corpus: smooth ramps, Gaussian blobs, step edges.

    Returns (count, size, size) float32 fields in [-1, 1].
    """
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(
        np.linspace(-1.0, 1.0, size), np.linspace(-1.0, 1.0, size), indexing="ij"
    )
    out = np.empty((count, size, size), dtype=np.float32)
    for i in range(count):
        kind = i % 3
        if kind == 0:
            a, b = rng.uniform(-1.0, 1.0, size=2)
            c = rng.uniform(-0.3, 0.3)
            img = a * xs + b * ys + c
        elif kind == 1:
            img = np.zeros_like(xs)
            for _ in range(rng.integers(1, 4)):
                cy, cx = rng.uniform(-0.8, 0.8, size=2)
                width = rng.uniform(0.15, 0.5)
                sign = rng.choice([-1.0, 1.0])
                img += sign * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * width**2))
        else:
            theta = rng.uniform(0.0, np.pi)
            offset = rng.uniform(-0.5, 0.5)
            proj = xs * np.cos(theta) + ys * np.sin(theta)
            lo, hi = sorted(rng.uniform(-1.0, 1.0, size=2))
            img = np.where(proj > offset, hi, lo)
        peak = np.abs(img).max()
        if peak > 1.0:
            img = img / peak
        out[i] = img.astype(np.float32)
    return out


def load_corpus(directory: str) -> np.ndarray:
    """Load every PGM/PNG in a directory (sorted) as [-1, 1] fields."""
    names = sorted(
        n for n in os.listdir(directory) if n.lower().endswith((".pgm", ".png"))
    )
    if not names:
        raise ValueError(f"no PGM/PNG images found in {directory}")
    fields = []
    for name in names:
        buf = load_image(os.path.join(directory, name))
        if buf.channels != 1:
            raise ValueError(f"{name}: training corpus must be single-channel")
        fields.append(normalize(buf))
    shapes = {f.shape for f in fields}
    if len(shapes) != 1:
        raise ValueError(f"corpus images disagree on extent: {sorted(shapes)}")
    return np.stack(fields)


# ---------------------------------------------------------------------------
# loss and optimizer
# ---------------------------------------------------------------------------

def dsm_loss(
    param_vars: dict[str, ad.Var],
    cfg: PatchConfig,
    batch_f0: np.ndarray,
    sched: NoiseSchedule,
    t: np.ndarray,
    noise: np.ndarray,
) -> ad.Var:
    """Noise-prediction MSE on one batch at the given timesteps/noise draws."""
    ab = sched.alpha_bar[t].astype(batch_f0.dtype)
    f_t = (
        np.sqrt(ab)[:, None, None] * batch_f0
        + np.sqrt(1.0 - ab)[:, None, None] * noise
    )
    params = DenoiserParams(cfg, param_vars)
    eps_hat, _ = denoiser.forward_fields(f_t, t, params)
    diff = ad.sub(eps_hat, noise)
    return ad.mean_all(ad.mul(diff, diff))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def clip_gradients(grads: dict[str, np.ndarray], clip: float) -> tuple[dict, float]:
    """Scale all gradients so their joint norm is at most `clip`."""
    norm = global_norm(grads)
    if clip > 0.0 and norm > clip:
        factor = clip / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


class Adam:
    """Standard Adam with bias correction; state is per-tensor moments."""

    def __init__(self, names, cfg: TrainConfig):
        self.cfg = cfg
        self.step_count = 0
        self.m = {n: None for n in names}
        self.v = {n: None for n in names}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.step_count += 1
        bc1 = 1.0 - c.beta1**self.step_count
        bc2 = 1.0 - c.beta2**self.step_count
        for name, g in grads.items():
            g = np.asarray(g, dtype=tensors[name].dtype)
            if self.m[name] is None:
                self.m[name] = np.zeros_like(tensors[name])
                self.v[name] = np.zeros_like(tensors[name])
            self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            tensors[name] = tensors[name] - c.lr * m_hat / (np.sqrt(v_hat) + c.eps)


def train(
    cfg: TrainConfig,
    data: np.ndarray,
    arch: PatchConfig,
    sched: NoiseSchedule,
    log_every: int = 0,
) -> tuple[DenoiserParams, list[float]]:
    """Run the optimization loop; returns trained params and per-step losses.

    Fully deterministic for a fixed config: one generator drives batch
    selection, timestep draws and noise draws in a fixed order.
    """
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 3 or data.shape[0] == 0:
        raise ValueError("training data must be a non-empty (N, H, W) stack")
    if data.shape[1] % arch.patch or data.shape[2] % arch.patch:
        raise ValueError(
            f"corpus extent {data.shape[1:]} not a multiple of patch {arch.patch}"
        )
    params = denoiser.init_params(arch, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(params.tensors.keys(), cfg)
    losses: list[float] = []
    for step in range(cfg.steps):
        idx = rng.integers(0, data.shape[0], size=cfg.batch)
        t = rng.integers(0, sched.T, size=cfg.batch)
        noise = rng.standard_normal((cfg.batch,) + data.shape[1:]).astype(np.float32)
        param_vars = {k: ad.Var(v) for k, v in params.tensors.items()}
        loss = dsm_loss(param_vars, arch, data[idx], sched, t, noise)
        value = float(loss.data)
        if not np.isfinite(value):
            raise RuntimeError(f"training diverged: non-finite loss at step {step}")
        loss.backward(np.ones((), dtype=np.float32))
        grads = {
            k: (v.grad if v.grad is not None else np.zeros_like(v.data))
            for k, v in param_vars.items()
        }
        grads, _ = clip_gradients(grads, cfg.clip)
        opt.step(params.tensors, grads)
        losses.append(value)
        if log_every and (step % log_every == 0 or step == cfg.steps - 1):
            print(f"step {step:6d}  loss {value:.5f}")
    return params, losses


def write_loss_csv(losses: list[float], path: str) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v:.8g}\n")


# ---------------------------------------------------------------------------
# gradient registry
# ---------------------------------------------------------------------------

# Differentiable primitives exposed for direct vector-Jacobian queries.
# Values are (callable, number of outputs); callables accept Vars.
PRIMITIVES = {
    "add": (ad.add, 1),
    "sub": (ad.sub, 1),
    "mul": (ad.mul, 1),
    "silu": (ad.silu, 1),
    "softplus": (ad.softplus, 1),
    "linear": (ad.linear, 1),
    "layer_norm": (ad.layer_norm, 1),
    "layer_norm_plain": (ad.layer_norm_plain, 1),
    "conv1d": (ad.conv1d_depthwise, 1),
    "zoh_discretize": (denoiser.zoh_discretize, 2),
    "ssm_scan": (denoiser.ssm_scan, 1),
    "mean_all": (ad.mean_all, 1),
    "adaln_decode": (denoiser.adaln_decode, 1),
}


def backward(primitive: str, inputs: tuple, upstream, **static) -> tuple:
    """Gradients of `primitive` at `inputs` against an upstream cotangent.

    `upstream` is one array, or a tuple for two-output primitives (None
    entries allowed).  Static keyword arguments (e.g. patch size) pass
    through to the op.  Returns one gradient per differentiable input.
    """
    if primitive == "patch_split":
        fn, n_out = (lambda x: ad.patch_split(x, **static)), 1
    elif primitive == "patch_merge":
        fn, n_out = (lambda x: ad.patch_merge(x, **static)), 1
    elif primitive in PRIMITIVES:
        base, n_out = PRIMITIVES[primitive]
        fn = (lambda *xs: base(*xs, **static)) if static else base
    else:
        raise KeyError(f"unknown primitive {primitive!r}")
    var_inputs = [ad.Var(np.asarray(x)) for x in inputs]
    out = fn(*var_inputs)
    if n_out == 1:
        pairs = [(out, np.asarray(upstream))]
    else:
        if not isinstance(upstream, (tuple, list)) or len(upstream) != n_out:
            raise ValueError(f"{primitive} needs {n_out} upstream cotangents")
        pairs = [
            (o, np.asarray(u)) for o, u in zip(out, upstream) if u is not None
        ]
    ad.backprop(pairs)
    return tuple(
        v.grad if v.grad is not None else np.zeros_like(v.data) for v in var_inputs
    )
