"""Built-in oracle suites behind the `selftest` CLI command.

Every suite re-derives an expected answer through an independent route
(dense linear algebra, quadrature, finite differences, convolution) and
compares the package implementation against it at a fixed tolerance.
Suites are keyed by name; a prefix filter selects a subset.
"""

from __future__ import annotations

import numpy as np

from . import metrics, training
from .denoiser import PatchConfig, denoise, init_params, ssm_scan, zoh_discretize
from .em import (
    EMConfig,
    GradientOperator,
    e_step,
    em_correct,
    hqs_objective,
    k_update,
    make_stack,
    u_update,
    update_hyperparams,
    x_update,
)
from .sampler import FusionRun, fuse
from .schedule import estimate_f0, forward_perturb, make_schedule, posterior_step


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(b)), 1e-30)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b))) / denom


def dense_normal_matrix(op: GradientOperator) -> np.ndarray:
    """(I + grad^T grad) as a dense matrix, built by probing unit fields."""
    h, w = op.shape
    n = h * w
    mat = np.zeros((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        field = e.reshape(h, w)
        gh, gv = op.apply(field)
        mat[:, j] = (field + op.adjoint(gh, gv)).ravel()
    return mat


def suite_em_dense_solve(seed: int = 0, trials: int = 20, op_factory=GradientOperator):
    """k_update against a dense solve of the same normal equations."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(trials):
        size = 8 if i % 2 == 0 else 12
        op = op_factory((size, size))
        mat = dense_normal_matrix(GradientOperator((size, size)))
        x = rng.standard_normal((size, size))
        uh = rng.standard_normal((size, size))
        uv = rng.standard_normal((size, size))
        ref_op = GradientOperator((size, size))
        rhs = (x + ref_op.adjoint(uh, uv)).ravel()
        k_dense = np.linalg.solve(mat, rhs).reshape(size, size)
        k_fft = k_update(x, uh, uv, op)
        worst = max(worst, _rel(k_fft, k_dense))
    return worst <= 1e-8, f"worst rel err {worst:.3e} (tol 1e-8, {trials} trials)"


def _quad_vertex(obj, shape):
    """Vertex of a pointwise quadratic from three exact evaluations."""
    g_m = obj(np.full(shape, -1.0))
    g_0 = obj(np.zeros(shape))
    g_p = obj(np.ones(shape))
    a = (g_p + g_m) / 2.0 - g_0
    b = (g_p - g_m) / 2.0
    return -b / (2.0 * a)


def suite_em_subproblem(seed: int = 0, trials: int = 20):
    """u and x updates against per-pixel quadratic minimizers."""
    rng = np.random.default_rng(seed)
    cfg = EMConfig()
    worst = 0.0
    for _ in range(trials):
        shape = (8, 8)
        op = GradientOperator(shape)
        k = rng.standard_normal(shape)
        y = rng.standard_normal(shape)
        m = np.abs(rng.standard_normal(shape)) + 0.05
        n = np.abs(rng.standard_normal(shape)) + 0.05
        gh, gv = op.apply(k)
        uh, uv = u_update(k, op, cfg)
        for u, d in ((uh, gh), (uv, gv)):
            ref = _quad_vertex(lambda v: cfg.psi * v * v + cfg.eta / 2.0 * (v - d) ** 2, shape)
            worst = max(worst, float(np.abs(u - ref).max()))
        x = x_update(y, k, m, n, cfg)
        ref = _quad_vertex(
            lambda v: m * m * (v - y) ** 2 + n * n * v * v + cfg.eta / 2.0 * (k - v) ** 2,
            shape,
        )
        worst = max(worst, float(np.abs(x - ref).max()))
    return worst <= 1e-10, f"worst abs err {worst:.3e} (tol 1e-10, {trials} trials)"


def suite_em_monotonicity(seed: int = 0, trials: int = 30):
    """A full sweep never increases the split objective (fixed m, n)."""
    rng = np.random.default_rng(seed)
    cfg = EMConfig()
    worst = -np.inf
    for _ in range(trials):
        shape = (10, 10)
        op = GradientOperator(shape)
        x = rng.standard_normal(shape)
        y = rng.standard_normal(shape)
        m = np.abs(rng.standard_normal(shape)) + 0.02
        n = np.abs(rng.standard_normal(shape)) + 0.02
        k = x.copy()
        uh, uv = op.apply(x)
        before = hqs_objective(x, y, k, (uh, uv), m, n, cfg, op)
        k = k_update(x, uh, uv, op)
        uh, uv = u_update(k, op, cfg)
        x = x_update(y, k, m, n, cfg)
        after = hqs_objective(x, y, k, (uh, uv), m, n, cfg, op)
        worst = max(worst, after - before)
    return worst <= 1e-9, f"worst increase {worst:.3e} (slack 1e-9, {trials} trials)"


def suite_em_degeneracy(seed: int = 0):
    """Two-source run equals a three-source run with a zero third source."""
    rng = np.random.default_rng(seed)
    corpus = training.synthetic_corpus(4, size=12, seed=seed)
    img1, img2 = corpus[0].astype(np.float64), corpus[1].astype(np.float64)
    cfg = EMConfig()
    f = rng.standard_normal((12, 12))
    stack2 = make_stack([img1, img2])
    stack3 = make_stack([img1, img2, np.zeros_like(img1)])
    s2 = s3 = None
    for _ in range(5):
        f2, s2 = em_correct(f, stack2, cfg, s2)
        f3, s3 = em_correct(f, stack3, cfg, s3)
        if not (f2 == f3).all():
            return False, "correction chains diverged between 2 and 3 sources"
        f = f2

    sched = make_schedule("linear", 20)
    params = init_params(PatchConfig(patch=4, dim=16, e_width=32, state_dim=8, depth=2), seed=1)
    fused2 = fuse(FusionRun(stack2, sched, params, cfg, seed=7))
    fused3 = fuse(FusionRun(stack3, sched, params, cfg, seed=7))
    if not (fused2 == fused3).all():
        return False, "fusion outputs differ between 2 and 3 sources"
    return True, "bit-identical over 5 correction steps and a 20-step fusion"


def _rk4_endpoint(a: float, b: float, dt: float, h0: float, drive: float, steps: int = 800):
    """Integrate dh/ds = a h + b * drive over [0, dt] with classic RK4."""
    h = h0
    step = dt / steps
    for _ in range(steps):
        k1 = a * h + b * drive
        k2 = a * (h + step / 2 * k1) + b * drive
        k3 = a * (h + step / 2 * k2) + b * drive
        k4 = a * (h + step * k3) + b * drive
        h = h + step / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return h


def suite_zoh(seed: int = 0, systems: int = 25):
    """Discretization against direct integration, plus branch continuity."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(systems):
        a = -float(rng.uniform(0.05, 8.0))
        b = float(rng.uniform(-2.0, 2.0))
        dt = float(rng.uniform(0.01, 1.5))
        abar, bbar = zoh_discretize(
            np.array([[a]]), np.array([[b]]), np.array([[dt]])
        )
        ref_a = _rk4_endpoint(a, 0.0, dt, h0=1.0, drive=0.0)
        ref_b = _rk4_endpoint(a, b, dt, h0=0.0, drive=1.0)
        worst = max(worst, abs(float(abar[0, 0, 0]) - ref_a), abs(float(bbar[0, 0, 0]) - ref_b))
    if worst > 1e-6:
        return False, f"worst abs err vs integration {worst:.3e} (tol 1e-6)"

    # series/exact agreement straddling the switch point |dt * a| = 1e-4
    gap = 0.0
    for x in (0.99e-4, 1.01e-4, -0.99e-4, -1.01e-4):
        a_arr = np.array([[x / 0.5]])
        _, bb = zoh_discretize(a_arr, np.array([[1.0]]), np.array([[0.5]]))
        exact = (np.exp(x) - 1.0) / x * 0.5
        gap = max(gap, abs(float(bb[0, 0, 0]) - exact))
    ok = gap <= 1e-10
    return ok, f"integration err {worst:.3e} (tol 1e-6); branch gap {gap:.3e} (tol 1e-10)"


def suite_scan(seed: int = 0, trials: int = 10):
    """Constant-parameter scan equals convolution with the unrolled kernel."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        tlen = int(rng.integers(4, 65))
        n = 4
        a = -np.abs(rng.uniform(0.2, 3.0, size=(1, n)))
        b = rng.standard_normal(n)
        c = rng.standard_normal(n)
        dt = float(rng.uniform(0.05, 0.8))
        z = rng.standard_normal(tlen)
        y = ssm_scan(
            z[:, None],
            np.tile(b, (tlen, 1)),
            np.tile(c, (tlen, 1)),
            np.full((tlen, 1), dt),
            a,
        )[:, 0]
        abar, bbar = zoh_discretize(a, b[None, :], np.array([[dt]]))
        abar = np.asarray(abar)[0, 0]
        bbar = np.asarray(bbar)[0, 0]
        kernel = np.array(
            [float(np.sum(c * (abar**j) * bbar)) for j in range(tlen)]
        )
        ref = np.array([float(np.sum(kernel[: t + 1][::-1] * z[: t + 1])) for t in range(tlen)])
        worst = max(worst, float(np.abs(y - ref).max()))
    return worst <= 1e-5, f"worst abs err {worst:.3e} (tol 1e-5, len<=64)"


def _fd_check(primitive: str, arrays: list[np.ndarray], seed: int, coords: int = 3, **static):
    """Central finite differences against the registered analytic gradients."""
    rng = np.random.default_rng(seed)
    out = _run_primitive(primitive, arrays, **static)
    if isinstance(out, tuple):
        cots = tuple(rng.standard_normal(o.shape) for o in out)
        upstream = cots
    else:
        cots = (rng.standard_normal(out.shape),)
        upstream = cots[0]
    grads = training.backward(primitive, tuple(arrays), upstream, **static)

    def scalar(arrs):
        o = _run_primitive(primitive, arrs, **static)
        outs = o if isinstance(o, tuple) else (o,)
        return float(sum(np.sum(c * v) for c, v in zip(cots, outs)))

    worst = 0.0
    for ti, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        for ci in rng.choice(flat.size, size=min(coords, flat.size), replace=False):
            h = 1e-5 * (1.0 + abs(flat[ci]))
            bumped = [a.copy() for a in arrays]
            bumped[ti].reshape(-1)[ci] += h
            hi = scalar(bumped)
            bumped[ti].reshape(-1)[ci] -= 2 * h
            lo = scalar(bumped)
            fd = (hi - lo) / (2 * h)
            an = float(grads[ti].reshape(-1)[ci])
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            worst = max(worst, rel)
    return worst


def _run_primitive(primitive: str, arrays, **static):
    from . import autodiff as ad

    if primitive == "patch_split":
        return ad.patch_split(arrays[0], **static)
    if primitive == "patch_merge":
        return ad.patch_merge(arrays[0], **static)
    fn, _ = training.PRIMITIVES[primitive]
    return fn(*arrays, **static)


def suite_gradcheck(seed: int = 0):
    """Finite-difference checks on every primitive in 64-bit (tol 1e-6)."""
    rng = np.random.default_rng(seed)
    bsz, tlen, d, e, n = 2, 6, 8, 10, 4
    cases = [
        ("linear", [rng.standard_normal((bsz, tlen, d)), rng.standard_normal((d, e)), rng.standard_normal(e)]),
        ("conv1d", [rng.standard_normal((bsz, tlen, e)), rng.standard_normal((e, 4)), rng.standard_normal(e)]),
        ("layer_norm", [rng.standard_normal((bsz, tlen, d)), rng.standard_normal(d), rng.standard_normal(d)]),
        ("layer_norm_plain", [rng.standard_normal((bsz, tlen, d))]),
        ("silu", [rng.standard_normal((bsz, tlen, e))]),
        ("softplus", [rng.standard_normal((bsz, tlen, e))]),
        ("mul", [rng.standard_normal((bsz, tlen, e)), rng.standard_normal((bsz, tlen, e))]),
        ("add", [rng.standard_normal((bsz, tlen, d)), rng.standard_normal((bsz, 1, d))]),
        (
            "zoh_discretize",
            [
                -np.abs(rng.standard_normal((e, n))) - 0.1,
                rng.standard_normal((bsz, tlen, n)),
                np.abs(rng.standard_normal((bsz, tlen, e))) * 0.3 + 0.01,
            ],
        ),
        (
            "ssm_scan",
            [
                rng.standard_normal((bsz, tlen, e)),
                rng.standard_normal((bsz, tlen, n)),
                rng.standard_normal((bsz, tlen, n)),
                np.abs(rng.standard_normal((bsz, tlen, e))) * 0.3 + 0.01,
                -np.abs(rng.standard_normal((e, n))) - 0.1,
            ],
        ),
        ("mean_all", [rng.standard_normal((bsz, tlen, d))]),
        (
            "adaln_decode",
            [
                rng.standard_normal((bsz, tlen, d)),
                rng.standard_normal((bsz, d)),
                rng.standard_normal((d, 2 * d)),
                rng.standard_normal(2 * d),
                rng.standard_normal((d, 6)),
                rng.standard_normal(6),
            ],
        ),
    ]
    worst = 0.0
    worst_name = ""
    for i, (name, arrays) in enumerate(cases):
        rel = _fd_check(name, arrays, seed=seed + i)
        if rel > worst:
            worst, worst_name = rel, name
    rel = _fd_check("patch_split", [rng.standard_normal((bsz, 8, 8))], seed=seed + 90, p=4)
    if rel > worst:
        worst, worst_name = rel, "patch_split"
    rel = _fd_check(
        "patch_merge", [rng.standard_normal((bsz, 4, 32))], seed=seed + 91, p=4, grid=(2, 2), channels=2
    )
    if rel > worst:
        worst, worst_name = rel, "patch_merge"
    return worst <= 1e-6, f"worst rel err {worst:.3e} on {worst_name} (tol 1e-6)"


def suite_inversion(seed: int = 0):
    """Perfect-noise inversion and the deterministic full reverse chain."""
    rng = np.random.default_rng(seed)
    sched = make_schedule("linear", 100)
    f0 = rng.uniform(-1.0, 1.0, size=(12, 12))
    worst = 0.0
    for t in range(sched.T):
        z = rng.standard_normal(f0.shape)
        f_t = forward_perturb(f0, t, sched, z)
        rec = estimate_f0(f_t, z, t, sched)
        worst = max(worst, float(np.abs(rec - f0).max()))
    if worst > 1e-5:
        return False, f"single-step inversion err {worst:.3e} (tol 1e-5)"

    z = rng.standard_normal(f0.shape)
    f = forward_perturb(f0, sched.T - 1, sched, z)
    for t in range(sched.T - 1, 0, -1):
        f = posterior_step(f, f0, t, sched, np.zeros_like(f))
    chain_err = float(np.abs(f - f0).max())
    ok = chain_err <= 1e-3
    return ok, f"single-step err {worst:.3e} (tol 1e-5); chain err {chain_err:.3e} (tol 1e-3)"


def suite_metrics(seed: int = 0):
    """Identity and ordering properties of the quality metrics."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(16, 16))
    checks = []
    y = rng.uniform(0.0, 1.0, size=(16, 16))
    sym = abs(
        metrics.mutual_information_pair(x, y) - metrics.mutual_information_pair(y, x)
    )
    checks.append(("MI symmetry", sym <= 1e-12, f"{sym:.2e}"))
    self_gap = abs(metrics.compute_metric("MI", x, [x]) - metrics.entropy(x))
    checks.append(("MI(x,x)=EN(x)", self_gap <= 1e-12, f"{self_gap:.2e}"))
    ssim_self = metrics.compute_metric("SSIM", x, [x])
    checks.append(("SSIM(x,x)=1", abs(ssim_self - 1.0) <= 1e-12, f"{ssim_self:.6f}"))
    prev = 1.0
    ordered = True
    for sd in (0.01, 0.05, 0.1):
        noisy = np.clip(x + rng.standard_normal(x.shape) * sd, 0.0, 1.0)
        val = metrics.ssim_pair(x, noisy)
        ordered = ordered and val < prev
        prev = val
    checks.append(("SSIM noise ordering", ordered, ""))
    q = metrics.compute_metric("Q_NCIE", x, [y])
    checks.append(("Q_NCIE in [0.8, 1]", 0.8 <= q <= 1.0, f"{q:.4f}"))
    bad = [f"{name} ({detail})" for name, ok, detail in checks if not ok]
    if bad:
        return False, "failed: " + "; ".join(bad)
    return True, f"{len(checks)} identities hold"


SUITES = {
    "em-dense-solve": suite_em_dense_solve,
    "em-subproblem": suite_em_subproblem,
    "em-monotonicity": suite_em_monotonicity,
    "em-degeneracy": suite_em_degeneracy,
    "zoh": suite_zoh,
    "scan": suite_scan,
    "gradcheck": suite_gradcheck,
    "inversion": suite_inversion,
    "metrics": suite_metrics,
}


def run_selftest(suite_filter: str | None = None, seed: int = 0):
    """Run (a prefix-filtered subset of) the suites; returns result triples."""
    names = [n for n in SUITES if suite_filter is None or n.startswith(suite_filter)]
    if not names:
        raise ValueError(
            f"no self-test suite matches {suite_filter!r}; available: {', '.join(SUITES)}"
        )
    results = []
    for name in names:
        try:
            ok, detail = SUITES[name](seed=seed)
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
