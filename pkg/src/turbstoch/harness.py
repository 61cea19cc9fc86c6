"""Validation harness: gradient-check suite and checks on generated ensembles."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import mstats as ms
from .refcurves import ReferenceModelParams, synth_reference
from .trainer import compute_loss
from .unet import build_model

LINEAR_TOL = 1e-8
NONLINEAR_TOL = 1e-4
# The full loss is O(1e2-1e3), so central differences carry ~1e-7 of roundoff
# at h = 1e-6; near-zero gradients are compared on this fraction of max|grad|.
LOSS_FLOOR = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: object
    target: str

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.value} (target {self.target})"


def _op_cases(rng):
    """(name, linear?, loss builder, leaves) for every differentiable primitive."""
    B, C, L = 2, 3, 16
    x = dc.Tensor(rng.standard_normal((B, C, L)), requires_grad=True)
    y = dc.Tensor(rng.standard_normal((B, C, L)), requires_grad=True)
    pos = dc.Tensor(rng.uniform(0.5, 2.0, (B, C, L)), requires_grad=True)
    r = rng.standard_normal((B, C, L))
    r_half = rng.standard_normal((B, C, L // 2))
    r_double = rng.standard_normal((B, C, 2 * L))
    w = dc.Parameter(rng.standard_normal((4, C, 4)), "w")
    wt = dc.Parameter(rng.standard_normal((C, 4, 5)), "wt")
    bias = dc.Parameter(rng.standard_normal(4), "b")
    r4 = rng.standard_normal((B, 4, L))
    gamma = dc.Parameter(rng.uniform(0.5, 1.5, C), "gamma")
    beta = dc.Parameter(rng.standard_normal(C), "beta")
    train_stats = dc.BatchNormStats()
    eval_stats = dc.BatchNormStats(mean=rng.standard_normal(C), var=rng.uniform(0.5, 2.0, C))
    u = dc.Tensor(np.cumsum(rng.standard_normal((2, 1, 64)), axis=-1), requires_grad=True)
    z = dc.Tensor(rng.standard_normal(200), requires_grad=True)
    rz = rng.standard_normal(ms.KL_BINS)

    m = dc.mean
    return [
        ("add", True, lambda: m((x + y) * r), [x, y]),
        ("sub", True, lambda: m((x - y) * r), [x, y]),
        ("mul", False, lambda: m(x * y * r), [x, y]),
        ("div", False, lambda: m(x / pos * r), [x, pos]),
        ("power", False, lambda: m(pos ** 2.5 * r) + m(x ** 3 * r), [x, pos]),
        ("log", False, lambda: m(dc.log(pos) * r), [pos]),
        ("exp", False, lambda: m(dc.exp(x) * r), [x]),
        ("maximum", False, lambda: m(dc.maximum(x, 0.1) * r), [x]),
        ("sum", True, lambda: dc.sum(dc.sum(x * r, axis=2) * 0.5), [x]),
        ("mean", True, lambda: m(m(x * r, axis=(0, 2))), [x]),
        ("getitem", True, lambda: m(x[:, 1:, 3:11] * r[:, 1:, 3:11]), [x]),
        ("reshape", True, lambda: m(dc.reshape(x, (-1,)) * r.reshape(-1)), [x]),
        ("cast", True, lambda: m(dc.cast(x, np.float64) * r), [x]),
        ("conv1d", True, lambda: m(dc.conv1d(x, w, bias) * r4), [x, w, bias]),
        ("conv_transpose1d", True, lambda: m(dc.conv_transpose1d(x, wt, None) * r4), [x, wt]),
        ("batch_norm1d[train]", False,
         lambda: m(dc.batch_norm1d(x, gamma, beta, train_stats, "train") ** 3 * r), [x, gamma, beta]),
        ("batch_norm1d[eval]", False,
         lambda: m(dc.batch_norm1d(x, gamma, beta, eval_stats, "eval") * r), [x, gamma, beta]),
        ("relu", False, lambda: m(dc.relu(x) * r), [x]),
        ("avg_pool1d", True, lambda: m(dc.avg_pool1d(x) * r_half), [x]),
        ("upsample1d", True, lambda: m(dc.upsample1d(x) * r_double), [x]),
        ("cumsum", True, lambda: m(dc.cumsum(x) * r), [x]),
        ("structure_functions", False,
         lambda: dc.sum(ms.structure_functions(u, [1, 3, 7, 20]) * rng_fixed(4, 3)), [u]),
        ("soft_histogram", False, lambda: dc.sum(ms.soft_histogram(z) * rz), [z]),
    ]


def rng_fixed(*shape):
    return np.random.default_rng(12345).standard_normal(shape)


def tiny_loss_case(n_train=256, pad=64, batch=2, seed=0, alpha=1.0, beta=0.1):
    """Full training criterion on a small double-precision model and a fixed noise batch."""
    model = build_model(seed, "float64")
    noise = np.random.default_rng(seed + 1).standard_normal((batch, 1, n_train + pad))
    scales = ms.ScaleSet.log_spaced(n_train // 2, 25)
    ref = synth_reference(ReferenceModelParams(), scales)

    def loss_fn():
        out = model.forward(noise, "train")
        return compute_loss(out, ref, alpha, beta, n_keep=n_train)[0]

    return model, loss_fn


def gradcheck_suite(n_train=256, pad=64, batch=2, h=1e-6, max_coords=240, seed=0,
                    tol=NONLINEAR_TOL, tol_linear=LINEAR_TOL):
    """Finite-difference check of every primitive and of the full loss.

    Returns ``(reports, results)``: the raw :class:`GradCheckReport` list and
    one :class:`CheckResult` per report with its tolerance applied.
    """
    rng = np.random.default_rng(seed)
    reports, results = [], []
    for name, linear, fn, leaves in _op_cases(rng):
        rep = dc.grad_check(fn, leaves, h=1e-4 if linear else h, op=name)
        limit = tol_linear if linear else tol
        reports.append(rep)
        results.append(CheckResult(f"gradcheck {name}", rep.max_rel_err < limit, rep.max_rel_err, f"< {limit:g}"))
    model, loss_fn = tiny_loss_case(n_train, pad, batch, seed)
    rep = dc.grad_check(loss_fn, model.parameters(), h=h, max_coords=max_coords, seed=seed,
                        op=f"loss[N={n_train},B={batch}]", floor=LOSS_FLOOR)
    reports.append(rep)
    results.append(CheckResult(f"gradcheck {rep.op}", rep.max_rel_err < tol, rep.max_rel_err, f"< {tol:g}"))
    return reports, results


# ----------------------------------------------------------------------------
# Statistical checks on generated ensembles
# ----------------------------------------------------------------------------


def _window_scales(lo, hi, count=16):
    return np.unique(np.round(np.geomspace(max(1, lo), hi, count)).astype(int))


def ensemble_report(fields, params=None, large_factors=(2.0, 8.0)):
    """Slope fits and scalar summaries of a generated ensemble.

    Windows follow the reference parameters: inertial range [20 eta, L/6],
    dissipative range [1, eta], plateau range [2L, 8L] (clipped to the field
    length).
    """
    params = params or ReferenceModelParams()
    arr = np.atleast_2d(np.asarray(fields, dtype=float))
    n = arr.shape[1]
    lo, hi = params.inertial_window
    inertial = _window_scales(lo, hi)
    diss = np.arange(1, int(params.eta) + 1)
    out = {"inertial_window": [lo, hi], "dissipative_window": [1, int(params.eta)]}

    c_in = ms.ensemble_curves(arr, inertial)
    out["zeta2_inertial"] = ms.fit_loglog_slope(c_in["logS2"], (lo, hi))[0]
    out["flatness_slope_inertial"] = ms.fit_loglog_slope(c_in["logF3"], (lo, hi))[0]
    out["skewness_inertial_mean"] = float(np.mean(c_in["skewness"].values))
    c_d = ms.ensemble_curves(arr, diss)
    out["s2_slope_dissipative"] = ms.fit_loglog_slope(c_d["logS2"], (1, params.eta))[0]

    l_large = int(round(large_factors[0] * params.L))
    if l_large < n:
        out["flatness_at_2L"] = float(ms.flatness_curve(arr, [l_large]).values[0])
    p_lo, p_hi = large_factors[0] * params.L, min(large_factors[1] * params.L, n - 1)
    if p_hi > p_lo:
        plateau = _window_scales(p_lo, p_hi, 8)
        out["plateau_window"] = [p_lo, p_hi]
        out["s2_plateau_slope"] = ms.fit_loglog_slope(ms.log_s2_curve(arr, plateau), (p_lo, p_hi))[0]
    out["kl_u"] = ms.kl_to_standard_gaussian(arr)
    return out


def training_claims(fields, params=None, widen=1.0, loss_scales=None):
    """Sub-checks of a trained generator against its synthesized reference.

    ``widen`` multiplies every tolerance (1.5 for the reduced training
    configuration).  Returns a list of :class:`CheckResult`.
    """
    params = params or ReferenceModelParams()
    arr = np.atleast_2d(np.asarray(fields, dtype=float))
    n = arr.shape[1]
    results = []

    scales = loss_scales if loss_scales is not None else ms.ScaleSet.log_spaced(n // 2, 25)
    scales = ms.ScaleSet(tuple(int(s) for s in scales))
    gen = ms.ensemble_curves(arr, scales)
    ref = synth_reference(params, scales.array())
    dev = float(np.max(np.abs(gen["logS2"].values - ref.logS2)))
    results.append(CheckResult("sup |logS2 - logS2_ref|", dev < 0.15 * widen, dev, f"< {0.15 * widen:g}"))

    lo, hi = params.inertial_window
    win = _window_scales(lo, hi)
    ref_w = synth_reference(params, win)
    ref_slope = ms.fit_loglog_slope(ms.StatCurve(win, ref_w.logS2, "logS2"), (lo, hi))[0]
    cw = ms.ensemble_curves(arr, win)
    slope = ms.fit_loglog_slope(cw["logS2"], (lo, hi))[0]
    results.append(CheckResult("inertial S2 slope - reference slope", abs(slope - ref_slope) < 0.05 * widen,
                               slope - ref_slope, f"|.| < {0.05 * widen:g}"))

    neg_scales = ms.ScaleSet.log_spaced(int(params.L), 40)
    skew = ms.skewness_curve(arr, neg_scales).values
    results.append(CheckResult("skewness < 0 on [1, L]", bool(np.all(skew < 0)), float(skew.max()), "max < 0"))
    mean_skew = float(np.mean(cw["skewness"].values))
    rel = abs(mean_skew + params.s0) / params.s0 if params.s0 > 0 else float("inf")
    results.append(CheckResult("inertial mean skewness vs -s0", rel < 0.30 * widen, mean_skew,
                               f"within {30 * widen:g}% of {-params.s0}"))

    f_slope = ms.fit_loglog_slope(cw["logF3"], (lo, hi))[0]
    results.append(CheckResult("inertial log(F/3) slope", abs(f_slope + 0.10) < 0.04 * widen, f_slope,
                               f"-0.10 +/- {0.04 * widen:g}"))

    l2 = int(round(2 * params.L))
    flat2 = float(ms.flatness_curve(arr, [l2]).values[0])
    results.append(CheckResult("flatness at l=2L", abs(flat2 - 3) < 0.3 * widen, flat2, f"3 +/- {0.3 * widen:g}"))
    kl = ms.kl_to_standard_gaussian(arr)
    results.append(CheckResult("KL(u) to standard Gaussian", kl < 0.01 * widen, kl, f"< {0.01 * widen:g}"))

    p_lo, p_hi = 2 * params.L, 8 * params.L
    plateau = _window_scales(p_lo, min(p_hi, n - 1), 8)
    s_pl = ms.fit_loglog_slope(ms.log_s2_curve(arr, plateau), (p_lo, p_hi))[0]
    results.append(CheckResult("S2 plateau slope on [2L, 8L]", abs(s_pl) < 0.15 * widen, s_pl,
                               f"|.| < {0.15 * widen:g}"))
    return results
