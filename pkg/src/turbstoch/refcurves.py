"""Target curves for training and synthetic oracle fields.

The default reference is a parametric model with three ranges of scales:
a smooth (Batchelor-type) range below the dissipative scale ``eta``, an
inertial range with lognormal-intermittency exponents, and a Gaussian
plateau above the integral scale ``L``:

    S2(l)        = sigma2 (l/eta)^2 (1 + (l/eta)^2)^(-(2 - zeta2)/2) (1 + (l/L)^2)^(-zeta2/2)
    skew(l)      = -s0 (1 + l/L)^(-1) (1 + (eta/l)^2)^(nu/2)
    log(F(l)/3)  = 2 c2 log(1 + (L/l)^2) (1 + (eta/l)^2)^(kappa/2)

with ``zeta2 = 2/3 + c2``.  In the inertial range S2 grows like
``l**zeta2`` and log(F/3) decays with slope ``-4 c2``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ParameterError, ParseError, RangeError

REF_COLUMNS = ("scale", "logS2", "skew", "logF3")


@dataclass(frozen=True)
class ReferenceModelParams:
    eta: float = 5.0
    L: float = 2350.0
    c2: float = 0.025
    sigma2: float = 1.0
    s0: float = 0.25
    nu: float = 0.3
    kappa: float = 0.5

    def validate(self):
        if not 0 < self.eta < self.L:
            raise ParameterError(f"need 0 < eta < L, got eta={self.eta}, L={self.L}")
        if not 0 < self.c2 < 0.1:
            raise ParameterError(f"need 0 < c2 < 0.1, got {self.c2}")
        if not self.sigma2 > 0:
            raise ParameterError(f"need sigma2 > 0, got {self.sigma2}")
        if self.s0 < 0 or self.nu < 0 or self.kappa < 0:
            raise ParameterError("s0, nu and kappa must be non-negative")
        for k, v in asdict(self).items():
            if not math.isfinite(v):
                raise ParameterError(f"{k} is not finite")
        return self

    @property
    def zeta2(self):
        return 2.0 / 3.0 + self.c2

    @property
    def inertial_window(self):
        """Scales well inside the inertial range: [20 eta, L/6]."""
        return (20.0 * self.eta, self.L / 6.0)

    @property
    def dissipative_window(self):
        return (0.1 * self.eta, 0.5 * self.eta)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown reference parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()}).validate()


@dataclass
class ReferenceCurves:
    scales: np.ndarray
    logS2: np.ndarray
    skew: np.ndarray
    logF3: np.ndarray

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=float)
        self.logS2 = np.asarray(self.logS2, dtype=float)
        self.skew = np.asarray(self.skew, dtype=float)
        self.logF3 = np.asarray(self.logF3, dtype=float)
        n = self.scales.shape
        if not (self.logS2.shape == self.skew.shape == self.logF3.shape == n):
            raise ParameterError("reference curves differ in length")

    @property
    def flatness(self):
        return 3.0 * np.exp(self.logF3)


def synth_reference(params, scales):
    """Evaluate the parametric reference model at (possibly non-integer) scales."""
    params.validate()
    l = np.asarray(list(scales), dtype=float)
    if np.any(~np.isfinite(l)) or np.any(l <= 0):
        raise ParameterError("reference scales must be positive and finite")
    eta, L, c2, z2 = params.eta, params.L, params.c2, params.zeta2
    x = l / eta
    y = l / L
    log_s2 = (np.log(params.sigma2) + 2 * np.log(x)
              - 0.5 * (2 - z2) * np.log1p(x * x)
              - 0.5 * z2 * np.log1p(y * y))
    small = (eta / l) ** 2
    skew = -params.s0 / (1 + y) * (1 + small) ** (params.nu / 2)
    log_f3 = 2 * c2 * np.log1p((L / l) ** 2) * (1 + small) ** (params.kappa / 2)
    return ReferenceCurves(l, log_s2, skew, log_f3)


def write_reference_csv(curves, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REF_COLUMNS)
        for row in zip(curves.scales, curves.logS2, curves.skew, curves.logF3):
            w.writerow([repr(float(v)) for v in row])
    return path


def load_reference_csv(path):
    """Read curves written by :func:`write_reference_csv` or produced externally."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty reference file", line=1)
    header = [h.strip() for h in rows[0]]
    missing = [c for c in REF_COLUMNS if c not in header]
    if missing:
        raise ParseError(f"missing columns: {', '.join(missing)}", line=1)
    cols = [header.index(c) for c in REF_COLUMNS]
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
        try:
            vals = [float(row[c]) for c in cols]
        except ValueError as exc:
            raise ParseError(f"malformed number ({exc})", line=lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite value", line=lineno)
        if vals[0] <= 0:
            raise ParseError(f"scale must be positive, got {vals[0]}", line=lineno)
        if data and vals[0] <= data[-1][1][0]:
            raise ParseError(f"scales not strictly increasing ({vals[0]} after {data[-1][1][0]})", line=lineno)
        data.append((lineno, vals))
    if not data:
        raise ParseError("no data rows", line=2)
    arr = np.array([v for _, v in data])
    return ReferenceCurves(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])


def resample_to_scales(curves, target):
    """Piecewise-linear interpolation of every curve in log(scale)."""
    t = np.asarray(list(target), dtype=float)
    lo, hi = curves.scales[0], curves.scales[-1]
    if np.any(t < lo * (1 - 1e-12)) or np.any(t > hi * (1 + 1e-12)):
        raise RangeError(f"target scales outside the reference range [{lo}, {hi}]")
    xs = np.log(curves.scales)
    xt = np.log(np.clip(t, lo, hi))
    return ReferenceCurves(
        t,
        np.interp(xt, xs, curves.logS2),
        np.interp(xt, xs, curves.skew),
        np.interp(xt, xs, curves.logF3),
    )


def make_test_field(kind, n, seed, beta=5.0 / 3.0):
    """Synthetic oracle field.

    ``iid-gaussian``: standard normal samples.  ``power-law-spectrum``:
    periodic field with amplitude spectrum ``k**(-beta/2)``, uniform random
    phases and unit sample variance; its S2 grows like ``l**(beta - 1)`` at
    scales small against ``n``.
    """
    rng = np.random.default_rng(seed)
    if kind == "iid-gaussian":
        return rng.standard_normal(n)
    if kind != "power-law-spectrum":
        raise ParameterError(f"unknown test field kind {kind!r}")
    if beta <= 0:
        raise ParameterError(f"spectral exponent must be positive, got {beta}")
    if n < 4 or n & (n - 1):
        raise ParameterError(f"spectral synthesis needs a power-of-two length, got {n}")
    k = np.arange(n // 2 + 1, dtype=float)
    amp = np.zeros_like(k)
    amp[1:] = k[1:] ** (-beta / 2)
    phase = rng.uniform(0.0, 2 * np.pi, size=k.size)
    spec = amp * np.exp(1j * phase)
    spec[-1] = amp[-1] * np.cos(phase[-1])
    field = np.fft.irfft(spec, n=n)
    return field / field.std()
