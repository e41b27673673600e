"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation the denoiser needs is a (forward, vjp) pair registered
here.  `Var` wraps an ndarray and records the graph only while gradients
are enabled; calling an op on plain ndarrays (or inside `no_grad`) runs
the pure numpy forward with zero bookkeeping, which is the inference path.

All vjps are hand-written analytic forms; the test suite checks each one
against central finite differences.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = [True]
_LN_EPS = 1e-5
_ZOH_SWITCH = 1e-4  # |dt * a| below this uses the series expansion


@contextlib.contextmanager
def no_grad():
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Var:
    """An ndarray plus the graph edge needed for backprop."""

    __slots__ = ("data", "grad", "_parents", "_bw")

    def __init__(self, data):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = ()
        self._bw = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def backward(self, seed=None):
        if seed is None:
            seed = np.ones_like(self.data)
        backprop([(self, np.asarray(seed))])

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, dtype={self.data.dtype})"


def backprop(pairs):
    """Accumulate gradients from (root, seed) pairs through the graph."""
    topo = []
    seen = set()
    for root, _ in pairs:
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
    for root, seed in pairs:
        root.grad = seed if root.grad is None else root.grad + seed
    for node in reversed(topo):
        if node.grad is None or node._bw is None:
            continue
        for parent, g in node._bw(node.grad):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


def _data(x):
    return x.data if isinstance(x, Var) else np.asarray(x)


def _apply(fwd, vjp, args, n_out=1):
    xs = tuple(_data(a) for a in args)
    outs, ctx = fwd(*xs)
    if n_out == 1:
        outs = (outs,)
    track = _GRAD_ENABLED[-1] and any(isinstance(a, Var) for a in args)
    if not track:
        return outs[0] if n_out == 1 else outs

    tracked = [(i, a) for i, a in enumerate(args) if isinstance(a, Var)]
    out_vars = []
    for slot in range(n_out):
        v = Var(outs[slot])
        v._parents = tuple(a for _, a in tracked)

        def _bw(g, _slot=slot):
            gouts = [None] * n_out
            gouts[_slot] = g
            gxs = vjp(ctx, tuple(gouts))
            return [(a, gxs[i]) for i, a in tracked]

        v._bw = _bw
        out_vars.append(v)
    return out_vars[0] if n_out == 1 else tuple(out_vars)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and affine ops
# ---------------------------------------------------------------------------

def add(a, b):
    def fwd(x, y):
        return x + y, (x.shape, y.shape)

    def vjp(ctx, gouts):
        (g,) = gouts
        sa, sb = ctx
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _apply(fwd, vjp, (a, b))


def sub(a, b):
    def fwd(x, y):
        return x - y, (x.shape, y.shape)

    def vjp(ctx, gouts):
        (g,) = gouts
        sa, sb = ctx
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _apply(fwd, vjp, (a, b))


def mul(a, b):
    def fwd(x, y):
        return x * y, (x, y)

    def vjp(ctx, gouts):
        (g,) = gouts
        x, y = ctx
        return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

    return _apply(fwd, vjp, (a, b))


def scale(a, s: float):
    def fwd(x):
        return x * s, None

    def vjp(ctx, gouts):
        (g,) = gouts
        return (g * s,)

    return _apply(fwd, vjp, (a,))


def reshape(a, shape):
    def fwd(x):
        return x.reshape(shape), x.shape

    def vjp(ctx, gouts):
        (g,) = gouts
        return (g.reshape(ctx),)

    return _apply(fwd, vjp, (a,))


def mean_all(a):
    def fwd(x):
        return np.asarray(x.mean()), (x.shape, x.size, x.dtype)

    def vjp(ctx, gouts):
        (g,) = gouts
        shape, size, dtype = ctx
        return (np.full(shape, float(g) / size, dtype=dtype),)

    return _apply(fwd, vjp, (a,))


def silu(a):
    def fwd(x):
        s = 1.0 / (1.0 + np.exp(-x))
        return x * s, (x, s)

    def vjp(ctx, gouts):
        (g,) = gouts
        x, s = ctx
        return (g * s * (1.0 + x * (1.0 - s)),)

    return _apply(fwd, vjp, (a,))


def softplus(a):
    def fwd(x):
        return np.logaddexp(0.0, x).astype(x.dtype), x

    def vjp(ctx, gouts):
        (g,) = gouts
        x = ctx
        return (g / (1.0 + np.exp(-x)),)

    return _apply(fwd, vjp, (a,))


def chunk2(a, axis=-1):
    """Split the given axis in half; inverse of concatenation."""

    def fwd(x):
        n = x.shape[axis]
        if n % 2:
            raise ValueError(f"axis {axis} of size {n} cannot be halved")
        lo, hi = np.split(x, 2, axis=axis)
        return (lo.copy(), hi.copy()), (x.shape, axis)

    def vjp(ctx, gouts):
        shape, ax = ctx
        glo, ghi = gouts
        half = list(shape)
        half[ax if ax >= 0 else len(shape) + ax] //= 2
        glo = glo if glo is not None else np.zeros(half)
        ghi = ghi if ghi is not None else np.zeros(half)
        return (np.concatenate([glo, ghi], axis=ax),)

    return _apply(fwd, vjp, (a,), n_out=2)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x, w, b):
    """y = x @ w + b over the trailing axis; x may carry any batch dims."""

    def fwd(xv, wv, bv):
        return xv @ wv + bv, (xv, wv)

    def vjp(ctx, gouts):
        (g,) = gouts
        xv, wv = ctx
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xv.reshape(-1, xv.shape[-1])
        return g @ wv.T, x2.T @ g2, g2.sum(axis=0)

    return _apply(fwd, vjp, (x, w, b))


def layer_norm(x, w, b):
    """Normalize the trailing axis to zero mean/unit variance, then affine."""

    def fwd(xv, wv, bv):
        mu = xv.mean(axis=-1, keepdims=True)
        var = xv.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + _LN_EPS)
        xhat = (xv - mu) * inv
        return xhat * wv + bv, (xhat, inv, wv)

    def vjp(ctx, gouts):
        (g,) = gouts
        xhat, inv, wv = ctx
        gh = g * wv
        gx = inv * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _apply(fwd, vjp, (x, w, b))


def layer_norm_plain(x):
    """Layer norm without learned scale/shift (decoder pre-modulation)."""

    def fwd(xv):
        mu = xv.mean(axis=-1, keepdims=True)
        var = xv.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + _LN_EPS)
        xhat = (xv - mu) * inv
        return xhat, (xhat, inv)

    def vjp(ctx, gouts):
        (g,) = gouts
        xhat, inv = ctx
        gx = inv * (
            g
            - g.mean(axis=-1, keepdims=True)
            - xhat * (g * xhat).mean(axis=-1, keepdims=True)
        )
        return (gx,)

    return _apply(fwd, vjp, (x,))


def conv1d_depthwise(x, k, b):
    """Causal depthwise convolution along the token axis.

    x: (B, T, E), k: (E, W), b: (E,).  Output token t mixes tokens
    t-W+1 .. t (zero-padded on the left), so no future token leaks in.
    """

    def fwd(xv, kv, bv):
        bsz, tlen, e = xv.shape
        width = kv.shape[1]
        xp = np.zeros((bsz, tlen + width - 1, e), dtype=xv.dtype)
        xp[:, width - 1 :, :] = xv
        y = np.zeros_like(xv)
        for j in range(width):
            y += kv[:, j] * xp[:, j : j + tlen, :]
        return y + bv, (xp, kv, tlen)

    def vjp(ctx, gouts):
        (g,) = gouts
        xp, kv, tlen = ctx
        width = kv.shape[1]
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kv)
        for j in range(width):
            gxp[:, j : j + tlen, :] += kv[:, j] * g
            gk[:, j] = (g * xp[:, j : j + tlen, :]).sum(axis=(0, 1))
        return gxp[:, width - 1 :, :], gk, g.sum(axis=(0, 1))

    return _apply(fwd, vjp, (x, k, b))


# ---------------------------------------------------------------------------
# state-space discretization and scan
# ---------------------------------------------------------------------------

def _phi(x):
    """(exp(x) - 1) / x with a series branch near zero."""
    small = np.abs(x) < _ZOH_SWITCH
    safe = np.where(small, 1.0, x)
    exact = (np.exp(safe) - 1.0) / safe
    series = 1.0 + x / 2.0 + x * x / 6.0
    return np.where(small, series, exact)


def _phi_prime(x):
    """Derivative of _phi, with the matching series branch."""
    small = np.abs(x) < _ZOH_SWITCH
    safe = np.where(small, 1.0, x)
    exact = (np.exp(safe) * (safe - 1.0) + 1.0) / (safe * safe)
    series = 0.5 + x / 3.0 + x * x / 8.0
    return np.where(small, series, exact)


def zoh_abar(a, dt):
    """Discrete transition exp(dt * a); a: (E, N), dt: (B, T, E)."""

    def fwd(av, dtv):
        abar = np.exp(dtv[..., None] * av)
        return abar.astype(dtv.dtype), (av, dtv, abar)

    def vjp(ctx, gouts):
        (g,) = gouts
        av, dtv, abar = ctx
        ga = (g * abar * dtv[..., None]).sum(axis=(0, 1))
        gdt = (g * abar * av).sum(axis=-1)
        return ga, gdt

    return _apply(fwd, vjp, (a, dt))


def zoh_bbar(a, b_seq, dt):
    """Discrete input map ((exp(dt a) - 1) / a) * b = phi(dt a) * dt * b.

    a: (E, N), b_seq: (B, T, N), dt: (B, T, E) -> (B, T, E, N).
    The |dt a| < 1e-4 region uses the quadratic series of phi so the
    expression stays exact through a = 0.
    """

    def fwd(av, bv, dtv):
        x = dtv[..., None] * av
        p = _phi(x)
        bbar = p * dtv[..., None] * bv[:, :, None, :]
        return bbar.astype(dtv.dtype), (av, bv, dtv, x, p)

    def vjp(ctx, gouts):
        (g,) = gouts
        av, bv, dtv, x, p = ctx
        pp = _phi_prime(x)
        b4 = bv[:, :, None, :]
        dt4 = dtv[..., None]
        ga = (g * b4 * dt4 * dt4 * pp).sum(axis=(0, 1))
        gb = (g * p * dt4).sum(axis=2)
        gdt = (g * b4 * (p + x * pp)).sum(axis=-1)
        return ga, gb, gdt

    return _apply(fwd, vjp, (a, b_seq, dt))


def ssm_scan_core(z, abar, bbar, c_seq):
    """Linear recurrence h_t = abar_t h_{t-1} + bbar_t z_t, y_t = <c_t, h_t>.

    z: (B, T, E), abar/bbar: (B, T, E, N), c_seq: (B, T, N) -> y (B, T, E).
    Strictly causal: h starts at zero and only past tokens enter h_t.
    """

    def fwd(zv, av, bv, cv):
        bsz, tlen, e = zv.shape
        n = av.shape[-1]
        hs = np.zeros((bsz, tlen, e, n), dtype=zv.dtype)
        h = np.zeros((bsz, e, n), dtype=zv.dtype)
        y = np.zeros_like(zv)
        for t in range(tlen):
            h = av[:, t] * h + bv[:, t] * zv[:, t, :, None]
            hs[:, t] = h
            y[:, t] = np.einsum("ben,bn->be", h, cv[:, t])
        return y, (zv, av, bv, cv, hs)

    def vjp(ctx, gouts):
        (g,) = gouts
        zv, av, bv, cv, hs = ctx
        bsz, tlen, e = zv.shape
        n = av.shape[-1]
        gz = np.zeros_like(zv)
        ga = np.zeros_like(av)
        gb = np.zeros_like(bv)
        gc = np.zeros_like(cv)
        lam = np.zeros((bsz, e, n), dtype=zv.dtype)
        for t in range(tlen - 1, -1, -1):
            lam = lam + cv[:, t][:, None, :] * g[:, t][:, :, None]
            h_prev = hs[:, t - 1] if t > 0 else np.zeros_like(lam)
            ga[:, t] = lam * h_prev
            gb[:, t] = lam * zv[:, t, :, None]
            gz[:, t] = (bv[:, t] * lam).sum(axis=-1)
            gc[:, t] = np.einsum("ben,be->bn", hs[:, t], g[:, t])
            lam = lam * av[:, t]
        return gz, ga, gb, gc

    return _apply(fwd, vjp, (z, abar, bbar, c_seq))


# ---------------------------------------------------------------------------
# patch rearrangement
# ---------------------------------------------------------------------------

def _split_shape(shape, p):
    if len(shape) == 3:
        bsz, h, w = shape
        c = 1
    elif len(shape) == 4:
        bsz, h, w, c = shape
    else:
        raise ValueError(f"expected (B,H,W) or (B,H,W,C), got {shape}")
    if h % p or w % p:
        raise ValueError(f"extent {h}x{w} not a multiple of patch {p}")
    return bsz, h, w, c


def patch_split(img, p):
    """(B, H, W[, C]) -> (B, T, p*p*C) tokens in row-major patch order."""

    def fwd(x):
        bsz, h, w, c = _split_shape(x.shape, p)
        x4 = x.reshape(bsz, h, w, c)
        gh, gw = h // p, w // p
        tok = (
            x4.reshape(bsz, gh, p, gw, p, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(bsz, gh * gw, p * p * c)
        )
        return np.ascontiguousarray(tok), (x.shape, gh, gw, c)

    def vjp(ctx, gouts):
        (g,) = gouts
        shape, gh, gw, c = ctx
        bsz = shape[0]
        img_g = (
            g.reshape(bsz, gh, gw, p, p, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(bsz, gh * p, gw * p, c)
        )
        return (np.ascontiguousarray(img_g).reshape(shape),)

    return _apply(fwd, vjp, (img,))


def patch_merge(tok, p, grid, channels):
    """(B, T, p*p*C) tokens back to a (B, H, W, C) field; inverse of split."""
    gh, gw = grid

    def fwd(x):
        bsz = x.shape[0]
        if x.shape[1] != gh * gw or x.shape[2] != p * p * channels:
            raise ValueError(f"token block {x.shape} does not match grid {grid}, patch {p}")
        img = (
            x.reshape(bsz, gh, gw, p, p, channels)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(bsz, gh * p, gw * p, channels)
        )
        return np.ascontiguousarray(img), x.shape

    def vjp(ctx, gouts):
        (g,) = gouts
        bsz = ctx[0]
        tok_g = (
            g.reshape(bsz, gh, p, gw, p, channels)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(ctx)
        )
        return (np.ascontiguousarray(tok_g),)

    return _apply(fwd, vjp, (tok,))
