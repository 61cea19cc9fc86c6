"""Command-line entry point: make-ref, train, generate, analyze, gradcheck.

Every run resolves one JSON configuration (defaults, then ``--config``,
then ``--set`` overrides and the dedicated flags), validates it and echoes
it to ``<out>/config.resolved.json`` next to the artifacts it produced.

Exit codes: 0 success, 2 usage error, 3 failed validation check, 4 runtime
error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from contextlib import nullcontext

import numpy as np

from . import harness
from . import mstats as ms
from .errors import ParameterError, TurbStochError, UsageError
from .fieldgen import FieldEnsemble, derive_seed, generate_ensemble, read_fields, write_fields
from .refcurves import ReferenceModelParams, make_test_field, synth_reference, write_reference_csv
from .trainer import TrainConfig, train
from .unet import load_checkpoint

log = logging.getLogger("turbstoch")

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_RUNTIME = 0, 2, 3, 4
THREADS_ENV = "TURBSTOCH_THREADS"
SOURCES = ("model", "iid-gaussian", "power-law-spectrum")

DEFAULTS = {
    "seed": 0,
    "out": "out",
    "threads": None,
    "reference": {
        "eta": 5.0, "L": 2350.0, "c2": 0.025, "sigma2": 1.0, "s0": 0.25, "nu": 0.3, "kappa": 0.5,
        "csv": None,
        "l_max": 16384,
        "n_scales": 200,
    },
    "trainer": {
        "n_train": 32768,
        "pad": 8192,
        "batch": 8,
        "epochs": 2000,
        "lr_schedule": [[0, 2e-3], [100, 1e-3], [1000, 5e-4]],
        "alpha": 1.0,
        "beta": 0.1,
        "n_scales": 25,
        "precision": "float32",
        "checkpoint_every": 100,
        "flatness_form": "linear",
        "bn_recalibration": 16,
    },
    "generation": {
        "checkpoint": None,
        "source": "model",
        "realizations": 256,
        "n": 32768,
        "pad": 8192,
        "seed": None,
        "batch": 8,
        "dtype": "float64",
        "beta": 5.0 / 3.0,
    },
    "analysis": {
        "fields": None,
        "n_scales": 40,
        "pdf_bins": ms.PDF_BINS,
        "pdf_bound": ms.PDF_BOUND,
        "pdf_scales": list(ms.PDF_SCALES),
        "inertial_window": None,
    },
    "gradcheck": {
        "n_train": 256,
        "pad": 64,
        "batch": 2,
        "h": 1e-6,
        "max_coords": 240,
        "tol": harness.NONLINEAR_TOL,
        "tol_linear": harness.LINEAR_TOL,
    },
}

# keys whose default is null, with the type a non-null value must have
NULLABLE = {
    "threads": int,
    "reference.csv": str,
    "generation.checkpoint": str,
    "generation.seed": int,
    "analysis.fields": str,
    "analysis.inertial_window": list,
}
PATH_KEYS = ("out", "reference.csv", "generation.checkpoint", "analysis.fields")


# ----------------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------------


def _coerce(key, value, default):
    """Check ``value`` against the type of ``default``; ints widen to floats."""
    if value is None:
        if key in NULLABLE:
            return None
        raise UsageError(f"{key}: null is not allowed")
    want = NULLABLE.get(key) if default is None else type(default)
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is int and isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, bool) != (want is bool) or not isinstance(value, want):
        raise UsageError(f"{key}: expected {want.__name__}, got {type(value).__name__} {value!r}")
    return value


def _merge(base, update, prefix=""):
    for k, v in update.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise UsageError(f"unknown configuration key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"{key}: expected a section, got {v!r}")
            _merge(base[k], v, key + ".")
        else:
            base[k] = _coerce(key, v, base[k])


def _set_path(cfg, key, raw):
    parts = key.split(".")
    node = cfg
    for i, p in enumerate(parts):
        if not isinstance(node, dict) or p not in node:
            raise UsageError(f"unknown configuration key {key!r}")
        if i < len(parts) - 1:
            node = node[p]
    current = node[parts[-1]]
    if isinstance(current, dict):
        raise UsageError(f"{key} is a section, set one of its keys instead")
    want = type(current) if current is not None else NULLABLE[key]
    if raw == "null":
        value = None
    elif want is str:
        value = raw
    else:
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            raise UsageError(f"{key}: expected {want.__name__}, got {raw!r}") from None
    node[parts[-1]] = _coerce(key, value, current)


def _get(cfg, key):
    node = cfg
    for p in key.split("."):
        node = node[p]
    return node


def reference_params(cfg):
    ref = {k: v for k, v in cfg["reference"].items() if k not in ("csv", "l_max", "n_scales")}
    return ReferenceModelParams.from_dict(ref)


def train_config(cfg):
    t = cfg["trainer"]
    return TrainConfig(
        seed=cfg["seed"], n_train=t["n_train"], pad=t["pad"], batch=t["batch"], epochs=t["epochs"],
        lr_schedule=tuple((int(s), float(v)) for s, v in t["lr_schedule"]),
        alpha=t["alpha"], beta=t["beta"], n_scales=t["n_scales"], precision=t["precision"],
        checkpoint_every=t["checkpoint_every"], flatness_form=t["flatness_form"],
        bn_recalibration=t["bn_recalibration"], reference=reference_params(cfg), reference_csv=cfg["reference"]["csv"],
    )


def validate_config(cfg):
    """Raise :class:`UsageError` naming the offending key for any invariant violation."""
    checks = [
        ("reference", lambda: reference_params(cfg)),
        ("trainer", lambda: train_config(cfg).validate()),
    ]
    for section, fn in checks:
        try:
            fn()
        except (ParameterError, TypeError, ValueError) as exc:
            raise UsageError(f"{section}: {exc}") from None
    if cfg["threads"] is not None and cfg["threads"] < 1:
        raise UsageError("threads: must be >= 1")
    g = cfg["generation"]
    if g["source"] not in SOURCES:
        raise UsageError(f"generation.source: expected one of {SOURCES}, got {g['source']!r}")
    if g["dtype"] not in ("float32", "float64"):
        raise UsageError(f"generation.dtype: expected float32 or float64, got {g['dtype']!r}")
    for k in ("realizations", "n", "batch"):
        if g[k] < 1:
            raise UsageError(f"generation.{k}: must be >= 1")
    if g["pad"] < 0 or g["pad"] % 2:
        raise UsageError("generation.pad: must be a non-negative even number")
    a = cfg["analysis"]
    if a["n_scales"] < 1 or a["pdf_bins"] < 1 or a["pdf_bound"] <= 0:
        raise UsageError("analysis: n_scales and pdf_bins must be >= 1, pdf_bound > 0")
    w = a["inertial_window"]
    if w is not None and (len(w) != 2 or not 0 < w[0] < w[1]):
        raise UsageError(f"analysis.inertial_window: expected [lo, hi] with 0 < lo < hi, got {w}")
    gc = cfg["gradcheck"]
    if not 1e-8 <= gc["h"] <= 1e-3:
        raise UsageError("gradcheck.h: must lie in [1e-8, 1e-3]")
    for k in ("n_train", "batch", "max_coords"):
        if gc[k] < 1:
            raise UsageError(f"gradcheck.{k}: must be >= 1")
    return cfg


def parse_config(args, base_dir=None):
    """Build the resolved configuration from parsed arguments.

    Precedence: defaults < ``--config`` file < ``--set`` overrides < the
    dedicated flags (``--seed``, ``--out``, ``--threads`` and friends).
    """
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        _merge(cfg, doc)
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        _set_path(cfg, key.strip(), raw.strip())
    flags = {
        "seed": "seed", "out": "out", "threads": "threads",
        "checkpoint": "generation.checkpoint", "fields": "analysis.fields", "source": "generation.source",
    }
    for attr, key in flags.items():
        v = getattr(args, attr, None)
        if v is not None:
            _set_path(cfg, key, str(v))
    if cfg["threads"] is None and os.environ.get(THREADS_ENV):
        try:
            cfg["threads"] = int(os.environ[THREADS_ENV])
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {os.environ[THREADS_ENV]!r}") from None
    base = base_dir or os.getcwd()
    for key in PATH_KEYS:
        v = _get(cfg, key)
        if v is not None:
            parts = key.split(".")
            node = cfg if len(parts) == 1 else cfg[parts[0]]
            node[parts[-1]] = os.path.abspath(os.path.join(base, v))
    return validate_config(cfg)


def write_resolved(cfg, command):
    os.makedirs(cfg["out"], exist_ok=True)
    path = os.path.join(cfg["out"], "config.resolved.json")
    with open(path, "w") as fh:
        json.dump({"command": command, **cfg}, fh, indent=2)
    return path


# ----------------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------------


def cmd_make_ref(cfg):
    r = cfg["reference"]
    scales = np.geomspace(1.0, r["l_max"], r["n_scales"])
    path = write_reference_csv(synth_reference(reference_params(cfg), scales),
                               os.path.join(cfg["out"], "reference.csv"))
    print(path)
    return EXIT_OK


def cmd_train(cfg):
    config = train_config(cfg)

    def progress(rec):
        if rec["epoch"] % 10 == 0 or rec["epoch"] == config.epochs - 1:
            log.info("epoch %d lr %.1e loss %.6g (S2 %.4g skew %.4g flat %.4g KL %.4g)", rec["epoch"],
                     rec["lr"], rec["loss"], rec["loss_S2"], rec["loss_skew"], rec["loss_flat"], rec["loss_KL"])

    result = train(config, out_dir=cfg["out"], progress=progress)
    print(result.checkpoint)
    return EXIT_OK


def _test_ensemble(g, seed):
    data = np.stack([make_test_field(g["source"], g["n"], derive_seed(seed, r), beta=g["beta"])
                     for r in range(g["realizations"])])
    return FieldEnsemble(data, base_seed=seed)


def cmd_generate(cfg):
    g = cfg["generation"]
    seed = cfg["seed"] if g["seed"] is None else g["seed"]
    if g["source"] == "model":
        if not g["checkpoint"]:
            raise UsageError("generate needs a checkpoint (--checkpoint or generation.checkpoint)")
        model = load_checkpoint(g["checkpoint"]).model
        ens = generate_ensemble(model, seed, g["realizations"], g["n"], g["pad"], batch=g["batch"])
    else:
        ens = _test_ensemble(g, seed)
    path = write_fields(ens, os.path.join(cfg["out"], "fields.nntf"), dtype=g["dtype"])
    print(path)
    return EXIT_OK


def analyze_fields(fields, cfg):
    """Curves, increment pdfs and the slope-fit report for an (R, N) array."""
    a = cfg["analysis"]
    n = fields.shape[1]
    scales = ms.ScaleSet.log_spaced(max(1, n // 2), a["n_scales"])
    curves = ms.ensemble_curves(fields, scales)
    pdf_scales = [l for l in a["pdf_scales"] if l < n]
    pdfs = [ms.increment_pdf(fields, l, a["pdf_bins"], a["pdf_bound"]) for l in pdf_scales]
    params = reference_params(cfg)
    report = harness.ensemble_report(fields, params)
    if a["inertial_window"] is not None:
        lo, hi = a["inertial_window"]
        win = ms.ensemble_curves(fields, harness._window_scales(lo, hi))
        report["inertial_window"] = [lo, hi]
        report["zeta2_inertial"] = ms.fit_loglog_slope(win["logS2"], (lo, hi))[0]
        report["flatness_slope_inertial"] = ms.fit_loglog_slope(win["logF3"], (lo, hi))[0]
        report["skewness_inertial_mean"] = float(np.mean(win["skewness"].values))
    report.update(realizations=int(fields.shape[0]), length=int(n))
    return curves, pdfs, report


def cmd_analyze(cfg):
    path = cfg["analysis"]["fields"]
    if not path:
        raise UsageError("analyze needs a field file (--fields or analysis.fields)")
    ens = read_fields(path)
    curves, pdfs, report = analyze_fields(ens.data, cfg)
    report["fields"] = path
    report["base_seed"] = ens.base_seed
    report["checkpoint_hash"] = ens.checkpoint_hash.hex()
    out = cfg["out"]
    ms.write_stats_csv(curves, os.path.join(out, "stats.csv"))
    ms.write_pdf_csv(pdfs, os.path.join(out, "pdf.csv"))
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_gradcheck(cfg):
    gc = cfg["gradcheck"]
    reports, results = harness.gradcheck_suite(
        n_train=gc["n_train"], pad=gc["pad"], batch=gc["batch"], h=gc["h"], max_coords=gc["max_coords"],
        seed=cfg["seed"], tol=gc["tol"], tol_linear=gc["tol_linear"])
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    with open(os.path.join(cfg["out"], "gradcheck.json"), "w") as fh:
        json.dump({"passed": ok, "reports": [r.as_dict() for r in reports]}, fh, indent=2)
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {
    "make-ref": cmd_make_ref,
    "train": cmd_train,
    "generate": cmd_generate,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one configuration key, e.g. trainer.batch=4 (repeatable)")
    common.add_argument("--seed", type=int, help="base seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help=f"cap on BLAS threads (fallback: ${THREADS_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="turbstoch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("make-ref", parents=[common], help="write the synthesized reference curves as CSV")
    sub.add_parser("train", parents=[common], help="train a generator against the reference curves")
    p = sub.add_parser("generate", parents=[common], help="generate an ensemble of fields")
    p.add_argument("--checkpoint", help="trained checkpoint (.nntb)")
    p.add_argument("--source", choices=SOURCES, help="generator: trained model or a synthetic test field")
    p = sub.add_parser("analyze", parents=[common], help="multiscale statistics of a field file")
    p.add_argument("--fields", help="field file (.nntf)")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every gradient")
    return parser


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = parse_config(args)
        write_resolved(cfg, args.command)
        with _thread_limit(cfg["threads"]):
            return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"turbstoch {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TurbStochError, OSError) as exc:
        print(f"turbstoch {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
