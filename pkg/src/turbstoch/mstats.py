"""Multiscale increment statistics of 1-D fields.

Two paths share the same definitions:

* the analysis path works on numpy arrays (a single field or an ensemble
  of shape ``(R, N)``) and reports per-realization means and spreads;
* the differentiable path works on :class:`~turbstoch.diffcore.Tensor`
  batches, pools batch and position into one expectation, and is used by
  the training losses.

Functions that accept both dispatch on the input type.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ContractError, DegenerateStatisticsError, FitError, ScaleError

EPS_STAT = 1e-12
EPS_KL = 1e-12

KL_BINS = 100
KL_RADIUS = 6.0

PDF_BINS = 201
PDF_BOUND = 10.0
PDF_SCALES = (2, 4, 8, 16, 64, 256, 1024, 4096, 10000)
# log-density reported for empty histogram bins
LOG_DENSITY_SENTINEL = -999.0

CURVE_KINDS = ("logS2", "skewness", "flatness", "logF3")


@dataclass(frozen=True)
class ScaleSet:
    """Strictly increasing integer separations, in units of the sampling distance."""

    scales: tuple

    def __post_init__(self):
        s = tuple(int(v) for v in self.scales)
        if not s:
            raise ScaleError("empty scale set")
        if any(v < 1 for v in s):
            raise ScaleError("scales must be >= 1")
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ScaleError("scales must be strictly increasing")
        object.__setattr__(self, "scales", s)

    @classmethod
    def log_spaced(cls, l_max, count=25, l_min=1):
        raw = np.round(np.geomspace(l_min, l_max, count)).astype(int)
        return cls(tuple(np.unique(raw)))

    def check_length(self, n):
        if self.scales[-1] >= n:
            raise ScaleError(f"scale {self.scales[-1]} not below field length {n}")
        return self

    def __len__(self):
        return len(self.scales)

    def __iter__(self):
        return iter(self.scales)

    def array(self):
        return np.asarray(self.scales)


def _scales(scales):
    return scales if isinstance(scales, ScaleSet) else ScaleSet(tuple(scales))


@dataclass
class StatCurve:
    scales: np.ndarray
    values: np.ndarray
    kind: str
    std: np.ndarray | None = None

    def __post_init__(self):
        self.scales = np.asarray(self.scales)
        self.values = np.asarray(self.values, dtype=float)
        if self.kind not in CURVE_KINDS:
            raise ContractError(f"unknown curve kind {self.kind!r}")
        if self.values.shape != self.scales.shape:
            raise ContractError("curve values and scales differ in length")


@dataclass
class IncrementPdf:
    scale: int
    edges: np.ndarray
    density: np.ndarray

    @property
    def centers(self):
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def log_density(self):
        out = np.full(self.density.shape, LOG_DENSITY_SENTINEL)
        nz = self.density > 0
        out[nz] = np.log(self.density[nz])
        return out


# ----------------------------------------------------------------------------
# Increments and structure functions
# ----------------------------------------------------------------------------


def _ensemble(fields):
    arr = np.asarray(fields, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise ContractError(f"expected a field or an (R, N) ensemble, got shape {arr.shape}")
    return arr


def _check_scale(l, n):
    if not 1 <= int(l) < n:
        raise ScaleError(f"scale {l} outside [1, {n})")


def increments(field, l):
    """``field[x + l] - field[x]`` along the last axis."""
    n = field.shape[-1]
    _check_scale(l, n)
    if isinstance(field, Tensor):
        return field[..., l:] - field[..., :-l]
    field = np.asarray(field, dtype=float)
    return field[..., l:] - field[..., :-l]


def structure_function(fields, l, p):
    """Mean of ``increments(field, l) ** p`` over positions and realizations."""
    if int(p) < 1:
        raise ContractError("structure-function order must be >= 1")
    if isinstance(fields, Tensor):
        return dc.mean(increments(fields, l) ** int(p))
    d = increments(_ensemble(fields), l)
    return float(np.mean(d ** int(p)))


def _per_realization_moments(arr, scales, orders=(2, 3, 4)):
    """Array (len(scales), len(orders), R) of per-realization increment moments."""
    out = np.empty((len(scales), len(orders), arr.shape[0]))
    for i, l in enumerate(scales):
        d = arr[:, l:] - arr[:, :-l]
        for j, p in enumerate(orders):
            out[i, j] = np.mean(d ** p, axis=1)
    return out


def _mean_std(x):
    r = x.shape[-1]
    return x.mean(axis=-1), (x.std(axis=-1, ddof=1) if r > 1 else np.zeros(x.shape[:-1]))


def ensemble_curves(fields, scales):
    """logS2, skewness, flatness and log(flatness/3) curves of a field or ensemble.

    Each statistic is computed per realization; the curve holds the mean and
    the standard deviation across realizations.
    """
    arr = _ensemble(fields)
    sc = _scales(scales).check_length(arr.shape[1])
    mom = _per_realization_moments(arr, sc.scales)
    s2, s3, s4 = mom[:, 0], mom[:, 1], mom[:, 2]
    if np.any(s2 <= EPS_STAT):
        bad = np.asarray(sc.scales)[np.any(s2 <= EPS_STAT, axis=1)]
        raise DegenerateStatisticsError(f"vanishing second-order structure function at scales {bad.tolist()}")
    stats = {
        "logS2": np.log(s2),
        "skewness": s3 / s2 ** 1.5,
        "flatness": s4 / s2 ** 2,
    }
    stats["logF3"] = np.log(stats["flatness"] / 3.0)
    out = {}
    for kind, per_real in stats.items():
        m, s = _mean_std(per_real)
        out[kind] = StatCurve(sc.array(), m, kind, s)
    return out


def log_s2_curve(fields, scales):
    return ensemble_curves(fields, scales)["logS2"]


def skewness_curve(fields, scales):
    """Skewness ``S3 / S2**1.5`` across scales."""
    return ensemble_curves(fields, scales)["skewness"]


def flatness_curve(fields, scales):
    """Flatness ``S4 / S2**2`` across scales."""
    return ensemble_curves(fields, scales)["flatness"]


def log_flatness_curve(fields, scales):
    return ensemble_curves(fields, scales)["logF3"]


# Differentiable path --------------------------------------------------------


def structure_functions(u, scales, orders=(2, 3, 4)):
    """Pooled structure functions of a tensor batch as one fused tape operation.

    ``u`` has shape (..., N); the result is a tensor of shape
    (len(scales), len(orders)) where entry (i, j) is the mean over every
    leading index and position of ``increments(u, l_i) ** p_j``.
    """
    data = u.data if isinstance(u, Tensor) else np.asarray(u, dtype=float)
    sc = _scales(scales).check_length(data.shape[-1])
    orders = tuple(int(p) for p in orders)
    out = np.empty((len(sc), len(orders)), dtype=np.float64)
    for i, l in enumerate(sc):
        d = data[..., l:] - data[..., :-l]
        for j, p in enumerate(orders):
            out[i, j] = np.mean(d ** p)

    def vjp(g):
        gu = np.zeros_like(data)
        for i, l in enumerate(sc):
            d = data[..., l:] - data[..., :-l]
            gd = np.zeros_like(d)
            for j, p in enumerate(orders):
                if g[i, j] != 0:
                    gd += (g[i, j] * p / d.size) * d ** (p - 1)
            gu[..., l:] += gd
            gu[..., :-l] -= gd
        return (gu,)

    return dc.custom_op("structure_functions", out, (u,), vjp)


def differentiable_curves(u, scales, eps=EPS_STAT):
    """logS2, skewness and flatness tensors (one entry per scale) of a batch.

    S2 is floored at ``eps`` before the log and the ratios; the returned
    ``guarded`` flag tells whether the floor was active anywhere.
    """
    sf = structure_functions(u, scales)
    s2 = sf[:, 0]
    guarded = bool(np.any(s2.data <= eps))
    s2g = dc.maximum(s2, eps)
    return {
        "logS2": dc.log(s2g),
        "skewness": sf[:, 1] / s2g ** 1.5,
        "flatness": sf[:, 2] / s2g ** 2,
        "guarded": guarded,
    }


# ----------------------------------------------------------------------------
# Soft histogram and Kullback-Leibler divergence
# ----------------------------------------------------------------------------


def kl_grid(bins=KL_BINS, radius=KL_RADIUS):
    edges = np.linspace(-radius, radius, bins + 1)
    return edges, 0.5 * (edges[1:] + edges[:-1])


def gaussian_bin_probs(bins=KL_BINS, radius=KL_RADIUS):
    """Standard-normal mass per bin; the two tails are folded into the edge bins."""
    edges, _ = kl_grid(bins, radius)
    cdf = ndtr(edges)
    cdf[0], cdf[-1] = 0.0, 1.0
    return np.diff(cdf)


def _soft_assign(z, centers, h, chunk=65536):
    """Yield (start, stop, bin indices, weights) with weight rows summing to one.

    Only bins within ``10 h`` plus one bin of the nearest centre are used;
    farther kernel weights are below ``exp(-50)`` of the nearest one.
    """
    nb = centers.size
    width = centers[1] - centers[0] if nb > 1 else 1.0
    reach = int(np.ceil(10 * h / width)) + 1
    offs = np.arange(-reach, reach + 1)
    for s in range(0, z.size, chunk):
        zc = z[s:s + chunk]
        j0 = np.clip(np.rint((zc - centers[0]) / width), 0, nb - 1).astype(np.int64)
        idx = j0[:, None] + offs[None, :]
        valid = (idx >= 0) & (idx < nb)
        idx = np.clip(idx, 0, nb - 1)
        logits = np.where(valid, -((zc[:, None] - centers[idx]) ** 2) / (2 * h * h), -np.inf)
        logits -= logits.max(axis=1, keepdims=True)
        a = np.exp(logits)
        a /= a.sum(axis=1, keepdims=True)
        yield s, s + zc.size, idx, a


def soft_histogram(sample, bins=KL_BINS, radius=KL_RADIUS, bandwidth=None):
    """Gaussian-kernel soft histogram of a standardized sample.

    Each sample is spread over the bins with weights proportional to
    ``exp(-(z - c_k)**2 / (2 h**2))`` (normalised per sample), so samples
    beyond the grid land in the edge bins.  The default bandwidth is half a
    bin width.  Returns a probability vector of length ``bins``.
    """
    _, centers = kl_grid(bins, radius)
    h = bandwidth if bandwidth is not None else 0.5 * (2 * radius / bins)
    if h <= 0:
        raise ContractError("bandwidth must be positive")
    data = sample.data if isinstance(sample, Tensor) else np.asarray(sample, dtype=float)
    z = np.asarray(data, dtype=np.float64).reshape(-1)
    if z.size == 0:
        raise ContractError("soft_histogram of an empty sample")
    hist = np.zeros(bins)
    for _, _, idx, a in _soft_assign(z, centers, h):
        hist += np.bincount(idx.ravel(), weights=a.ravel(), minlength=bins)
    hist /= z.size
    if not isinstance(sample, Tensor):
        return hist

    def vjp(g):
        gz = np.empty_like(z)
        for s, e, idx, a in _soft_assign(z, centers, h):
            d = -(z[s:e, None] - centers[idx]) / (h * h)
            dbar = (a * d).sum(axis=1, keepdims=True)
            gz[s:e] = (a * (d - dbar) * g[idx]).sum(axis=1)
        return ((gz / z.size).reshape(data.shape).astype(data.dtype, copy=False),)

    return dc.custom_op("soft_histogram", hist, (sample,), vjp)


def kl_divergence(p, q, eps=EPS_KL):
    """``sum p log(p/q)`` with ``0 log 0 = 0`` and ``q`` floored at ``eps``."""
    pd = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if pd.shape != q.shape:
        raise ContractError(f"p and q differ in shape: {pd.shape} vs {q.shape}")
    if np.any(pd < 0) or np.any(q < 0):
        raise ContractError("probability vectors must be non-negative")
    if abs(float(pd.sum()) - 1.0) > 1e-6:
        raise ContractError(f"p must sum to 1 (sums to {float(pd.sum())})")
    logq = np.log(np.maximum(q, eps))
    if isinstance(p, Tensor):
        return dc.sum(p * (dc.log(dc.maximum(p, EPS_KL)) - logq))
    nz = pd > 0
    return float(np.sum(pd[nz] * (np.log(pd[nz]) - logq[nz])))


def kl_to_standard_gaussian(fields, bins=KL_BINS, radius=KL_RADIUS):
    """KL divergence between the standardized pooled values and N(0, 1).

    Values of every realization are pooled, centred and scaled to unit
    variance, soft-histogrammed and compared with the binned Gaussian.
    """
    q = gaussian_bin_probs(bins, radius)
    if isinstance(fields, Tensor):
        if fields.size == 0:
            raise ContractError("empty batch")
        centred = fields - dc.mean(fields)
        var = dc.mean(centred ** 2)
        if float(var.data) <= EPS_STAT:
            raise DegenerateStatisticsError("zero variance batch")
        z = centred / var ** 0.5
        return kl_divergence(soft_histogram(z, bins, radius), q)
    x = np.asarray(fields, dtype=float).reshape(-1)
    if x.size == 0:
        raise ContractError("empty batch")
    sd = x.std()
    if sd ** 2 <= EPS_STAT:
        raise DegenerateStatisticsError("zero variance batch")
    return kl_divergence(soft_histogram((x - x.mean()) / sd, bins, radius), q)


# ----------------------------------------------------------------------------
# Increment pdfs and slope fits
# ----------------------------------------------------------------------------


def increment_pdf(fields, l, bins=PDF_BINS, bound=PDF_BOUND):
    """Histogram density of the pooled, centred and standardized increments at scale ``l``."""
    arr = _ensemble(fields)
    d = increments(arr, l).reshape(-1)
    if d.size < 10 * bins:
        raise ContractError(f"{d.size} increments is too few for {bins} bins")
    sd = d.std()
    if sd == 0:
        raise DegenerateStatisticsError(f"constant increments at scale {l}")
    z = (d - d.mean()) / sd
    edges = np.linspace(-bound, bound, bins + 1)
    counts, _ = np.histogram(z, bins=edges)
    width = edges[1] - edges[0]
    total = counts.sum()
    density = counts / (total * width) if total else counts.astype(float)
    return IncrementPdf(int(l), edges, density)


def fit_loglog_slope(curve, window):
    """Least-squares line of a log-valued curve against log(scale) inside ``window``.

    Returns ``(slope, intercept, rms_residual)``.
    """
    if curve.kind not in ("logS2", "logF3"):
        raise ContractError(f"no log-log fit defined for curve kind {curve.kind!r}")
    lo, hi = window
    sel = (curve.scales >= lo) & (curve.scales <= hi)
    if sel.sum() < 3:
        raise FitError(f"only {int(sel.sum())} scales inside window [{lo}, {hi}]")
    x = np.log(curve.scales[sel].astype(float))
    y = curve.values[sel]
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    return float(slope), float(intercept), float(np.sqrt(np.mean(resid ** 2)))


# ----------------------------------------------------------------------------
# CSV output
# ----------------------------------------------------------------------------

STATS_COLUMNS = ("scale", "logS2_mean", "logS2_std", "skew_mean", "skew_std", "logF3_mean", "logF3_std")
PDF_COLUMNS = ("scale", "bin_center", "log_density")


def write_stats_csv(curves, path):
    s2, sk, f3 = curves["logS2"], curves["skewness"], curves["logF3"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATS_COLUMNS)
        for i, l in enumerate(s2.scales):
            w.writerow([int(l)] + [repr(float(v)) for v in (
                s2.values[i], s2.std[i], sk.values[i], sk.std[i], f3.values[i], f3.std[i])])
    return path


def write_pdf_csv(pdfs, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PDF_COLUMNS)
        for pdf in pdfs:
            for c, v in zip(pdf.centers, pdf.log_density):
                w.writerow([pdf.scale, repr(float(c)), repr(float(v))])
    return path
