"""Reference-free and full-reference fusion quality metrics.

All metrics take a fused image and its source images as single-channel
arrays in [0, 1] and reduce to one scalar per metric.  Histogram metrics
use 256 bins; intensity-scaled metrics (SD, PSNR, SSIM) work on the
0..255 range.  Pairwise metrics report their mean (PSNR, SSIM, CC) or sum
(MI, SCD) over sources, and the per-source values are kept in the report.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

METRIC_ORDER = ("EN", "SD", "PSNR", "SSIM", "MI", "CC", "SCD", "Q_NCIE")
_PAIRWISE = ("PSNR", "SSIM", "MI", "CC", "SCD")

_BINS = 256
_PSNR_CAP = 99.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1, _SSIM_K2, _SSIM_L = 0.01, 0.03, 255.0


def _validate(fused: np.ndarray, sources: list[np.ndarray]) -> tuple[np.ndarray, list]:
    fused = np.asarray(fused, dtype=np.float64)
    srcs = [np.asarray(s, dtype=np.float64) for s in sources]
    if fused.ndim != 2:
        raise ValueError("metrics expect single-channel 2-d images")
    for s in srcs:
        if s.shape != fused.shape:
            raise ValueError(f"source extent {s.shape} != fused {fused.shape}")
    for img in [fused, *srcs]:
        if img.min() < -1e-9 or img.max() > 1.0 + 1e-9:
            raise ValueError("metric inputs must lie in [0, 1]")
    return np.clip(fused, 0.0, 1.0), [np.clip(s, 0.0, 1.0) for s in srcs]


def _hist(x: np.ndarray) -> np.ndarray:
    counts, _ = np.histogram(x, bins=_BINS, range=(0.0, 1.0))
    return counts / x.size


def _hist2(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    counts, _, _ = np.histogram2d(
        x.ravel(), y.ravel(), bins=_BINS, range=[[0.0, 1.0], [0.0, 1.0]]
    )
    return counts / x.size


def entropy(x: np.ndarray) -> float:
    """Shannon entropy (bits) of the 256-bin intensity histogram."""
    p = _hist(x)
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def standard_deviation(x: np.ndarray) -> float:
    """Population standard deviation on the 0..255 intensity scale."""
    return float(x.std() * 255.0)


def psnr_pair(fused: np.ndarray, src: np.ndarray) -> float:
    mse = float(np.mean((fused - src) ** 2)) * 255.0**2
    if mse == 0.0:
        return _PSNR_CAP
    return min(_PSNR_CAP, 10.0 * math.log10(255.0**2 / mse))


def _entropy_bits(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def mutual_information_pair(x: np.ndarray, y: np.ndarray) -> float:
    """Histogram mutual information in bits (256 bins).

    Computed as H(x) + H(y) - H(x, y) so that the self-MI identity
    MI(x, x) = EN(x) holds exactly in floating point.
    """
    pxy = _hist2(x, y)
    px = pxy.sum(axis=1)
    py = pxy.sum(axis=0)
    return _entropy_bits(px) + _entropy_bits(py) - _entropy_bits(pxy)


def _gaussian_window() -> np.ndarray:
    half = (_SSIM_WINDOW - 1) / 2.0
    coords = np.arange(_SSIM_WINDOW) - half
    g = np.exp(-(coords**2) / (2.0 * _SSIM_SIGMA**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_pair(x: np.ndarray, y: np.ndarray) -> float:
    """Mean structural similarity over valid 11x11 Gaussian windows."""
    if min(x.shape) < _SSIM_WINDOW:
        raise ValueError(f"image smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} SSIM window")
    a = x * _SSIM_L
    b = y * _SSIM_L
    w = _gaussian_window()

    def wfilter(img):
        view = np.lib.stride_tricks.sliding_window_view(img, w.shape)
        return np.tensordot(view, w, axes=((2, 3), (0, 1)))

    mu_a = wfilter(a)
    mu_b = wfilter(b)
    var_a = wfilter(a * a) - mu_a**2
    var_b = wfilter(b * b) - mu_b**2
    cov = wfilter(a * b) - mu_a * mu_b
    c1 = (_SSIM_K1 * _SSIM_L) ** 2
    c2 = (_SSIM_K2 * _SSIM_L) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def correlation_pair(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation; degenerate (constant) inputs map to 1 or 0."""
    if np.array_equal(x, y):
        # identical arrays correlate exactly; the dot-product route would
        # land 1 ulp off through the two square roots
        return 1.0
    xc = x - x.mean()
    yc = y - y.mean()
    nx = float(np.sqrt((xc**2).sum()))
    ny = float(np.sqrt((yc**2).sum()))
    if nx == 0.0 and ny == 0.0:
        return 1.0 if np.array_equal(x, y) else 0.0
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float((xc * yc).sum() / (nx * ny))


def sum_correlation_of_differences(fused: np.ndarray, sources: list[np.ndarray]) -> float:
    """Sum over sources i of corr(fused - mean(other sources), source i).

    With two sources this is the usual pair form corr(F - S2, S1) +
    corr(F - S1, S2); the mean over the remaining sources generalizes it
    to three.
    """
    if len(sources) < 2:
        raise ValueError("difference correlation needs at least 2 sources")
    total = 0.0
    for i, src in enumerate(sources):
        others = [s for j, s in enumerate(sources) if j != i]
        rest = np.mean(others, axis=0)
        total += correlation_pair(fused - rest, src)
    return float(total)


def nonlinear_correlation_coefficient(x: np.ndarray, y: np.ndarray) -> float:
    """Joint-histogram correlation measure in [0, 1] (base-256 entropies)."""
    pxy = _hist2(x, y)
    px = pxy.sum(axis=1)
    py = pxy.sum(axis=0)
    log_b = math.log(_BINS)

    def h(p):
        p = p[p > 0]
        return float(-(p * np.log(p)).sum() / log_b)

    return h(px) + h(py) - h(pxy[pxy > 0])


def nonlinear_correlation_entropy(fused: np.ndarray, sources: list[np.ndarray]) -> float:
    """Entropy of the joint nonlinear-correlation matrix of {fused, sources}.

    The matrix has unit diagonal and pairwise nonlinear correlations off
    it; the value is one plus the base-256 entropy of its eigenvalue
    distribution.  For a fused image and two sources the construction
    bounds it to [0.8, 1]: strongly dependent image sets land near the
    top of the band, mutually independent ones near the bottom.
    """
    imgs = [fused, *sources]
    k = len(imgs)
    r = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            r[i, j] = r[j, i] = nonlinear_correlation_coefficient(imgs[i], imgs[j])
    lam = np.linalg.eigvalsh(r)
    lam = np.clip(lam, 0.0, None) / k
    nz = lam[lam > 0]
    return float(1.0 + (nz * np.log(nz) / math.log(_BINS)).sum())


_PAIR_FUNCS = {
    "PSNR": psnr_pair,
    "SSIM": ssim_pair,
    "MI": mutual_information_pair,
    "CC": correlation_pair,
}


def compute_metric(name: str, fused: np.ndarray, sources: list[np.ndarray]) -> float:
    """One metric by name; see METRIC_ORDER for the supported set."""
    fused, sources = _validate(fused, sources)
    if name == "EN":
        return entropy(fused)
    if name == "SD":
        return standard_deviation(fused)
    if name == "PSNR":
        return float(np.mean([psnr_pair(fused, s) for s in sources]))
    if name == "SSIM":
        return float(np.mean([ssim_pair(fused, s) for s in sources]))
    if name == "MI":
        return float(np.sum([mutual_information_pair(fused, s) for s in sources]))
    if name == "CC":
        return float(np.mean([correlation_pair(fused, s) for s in sources]))
    if name == "SCD":
        return sum_correlation_of_differences(fused, sources)
    if name == "Q_NCIE":
        return nonlinear_correlation_entropy(fused, sources)
    raise ValueError(f"unknown metric {name!r}")


@dataclass
class MetricReport:
    """All metrics for one fused image, with per-source breakdowns."""

    values: dict[str, float]
    per_source: dict[str, list[float]]
    n_sources: int
    label: str = "fused"
    notes: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "label": self.label,
                "n_sources": self.n_sources,
                "values": self.values,
                "per_source": self.per_source,
            },
            indent=2,
            sort_keys=True,
        )


def evaluate(fused: np.ndarray, sources: list[np.ndarray], label: str = "fused") -> MetricReport:
    """Every metric in METRIC_ORDER for one fused image."""
    fused, sources = _validate(fused, sources)
    values: dict[str, float] = {}
    per_source: dict[str, list[float]] = {}
    for name in METRIC_ORDER:
        values[name] = compute_metric(name, fused, sources)
    for name, fn in _PAIR_FUNCS.items():
        per_source[name] = [float(fn(fused, s)) for s in sources]
    return MetricReport(values, per_source, len(sources), label)


def reports_to_csv(reports: list[MetricReport]) -> str:
    """Stable-column CSV, one row per fused image."""
    lines = ["image," + ",".join(METRIC_ORDER)]
    for rep in reports:
        row = [rep.label] + [f"{rep.values[name]:.6f}" for name in METRIC_ORDER]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def format_table(reports: list[MetricReport]) -> str:
    """Fixed-width image x metric grid for terminal output."""
    label_w = max(5, max((len(r.label) for r in reports), default=5))
    header = "image".ljust(label_w) + "".join(f"{name:>10}" for name in METRIC_ORDER)
    rule = "-" * len(header)
    lines = [header, rule]
    for rep in reports:
        cells = "".join(f"{rep.values[name]:>10.4f}" for name in METRIC_ORDER)
        lines.append(rep.label.ljust(label_w) + cells)
    return "\n".join(lines)
