"""Loss assembly and the training loop.

The criterion compares the multiscale statistics of the generated field
``u = cumsum(increments)`` with reference curves:

    loss = alpha * (L_S2 + L_skew + L_flat) + beta * L_KL

where each curve term is a sum over scales of squared differences (of
log S2, skewness and flatness) and ``L_KL`` is the divergence between the
standardized values of ``u`` and a standard Gaussian.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from . import mstats as ms
from .errors import ContractError, ParameterError, TrainingDivergedError
from .refcurves import ReferenceModelParams, load_reference_csv, resample_to_scales, synth_reference
from .unet import build_model, save_checkpoint

log = logging.getLogger(__name__)

DEFAULT_LR_SCHEDULE = ((0, 2e-3), (100, 1e-3), (1000, 5e-4))

# stream ids: training noise, and noise for recalibrating batch-norm statistics
_NOISE_STREAM = 1
_RECAL_STREAM = 2


def lr_schedule(epoch, table=DEFAULT_LR_SCHEDULE):
    """Piecewise-constant learning rate; each boundary belongs to the later segment."""
    if epoch < 0:
        raise ContractError(f"negative epoch {epoch}")
    lr = table[0][1]
    for start, value in table:
        if epoch >= start:
            lr = value
    return lr


@dataclass
class TrainConfig:
    seed: int = 0
    n_train: int = 32768
    pad: int = 8192
    batch: int = 8
    epochs: int = 2000
    lr_schedule: tuple = DEFAULT_LR_SCHEDULE
    alpha: float = 1.0
    beta: float = 0.1
    n_scales: int = 25
    precision: str = "float32"
    checkpoint_every: int = 100
    flatness_form: str = "linear"
    bn_recalibration: int = 16
    reference: ReferenceModelParams = field(default_factory=ReferenceModelParams)
    reference_csv: str | None = None

    @property
    def n_input(self):
        return self.n_train + self.pad

    def validate(self):
        if self.n_train < 4 or self.pad < 0 or self.pad % 2:
            raise ParameterError("n_train must be >= 4 and pad a non-negative even number")
        if self.n_input % 16:
            raise ParameterError(f"n_train + pad = {self.n_input} is not divisible by 16")
        if self.batch < 2:
            raise ParameterError("batch must be >= 2 for batch normalisation")
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError("loss weights must be non-negative")
        if self.epochs < 0:
            raise ParameterError("epochs must be non-negative")
        if self.bn_recalibration < 0:
            raise ParameterError("bn_recalibration must be non-negative")
        if self.flatness_form not in ("linear", "log"):
            raise ParameterError(f"flatness_form must be 'linear' or 'log', got {self.flatness_form!r}")
        if self.precision not in ("float32", "float64"):
            raise ParameterError(f"unknown precision {self.precision!r}")
        starts = [s for s, _ in self.lr_schedule]
        if not starts or starts[0] != 0 or starts != sorted(starts):
            raise ParameterError("lr schedule must start at epoch 0 with increasing boundaries")
        self.reference.validate()
        return self

    def loss_scales(self):
        return ms.ScaleSet.log_spaced(self.n_train // 2, self.n_scales)

    def reference_curves(self):
        scales = self.loss_scales()
        if self.reference_csv:
            return resample_to_scales(load_reference_csv(self.reference_csv), scales)
        return synth_reference(self.reference, scales)

    def as_dict(self):
        d = asdict(self)
        d["lr_schedule"] = [list(p) for p in self.lr_schedule]
        return d


def compute_loss(output, reference, alpha=1.0, beta=0.1, n_keep=None, flatness_form="linear"):
    """Training criterion for a batch of generated increments.

    ``output`` is the network output of shape (B, 1, n_in); its central
    ``n_keep`` samples are integrated into ``u``.  ``reference`` must be
    sampled on integer scales, which become the loss scales.  Returns the
    scalar loss tensor and a breakdown dict of floats.
    """
    n_in = output.shape[-1]
    n_keep = n_in if n_keep is None else int(n_keep)
    if (n_in - n_keep) % 2 or n_keep > n_in:
        raise ContractError(f"cannot trim {n_in} samples symmetrically to {n_keep}")
    start = (n_in - n_keep) // 2
    inc = output[..., start:start + n_keep] if n_keep != n_in else output
    u = dc.cumsum(dc.cast(inc, np.float64))

    scales = ms.ScaleSet(tuple(int(round(s)) for s in reference.scales))
    cv = ms.differentiable_curves(u, scales)
    l_s2 = dc.sum((reference.logS2 - cv["logS2"]) ** 2)
    l_skew = dc.sum((reference.skew - cv["skewness"]) ** 2)
    if flatness_form == "log":
        l_flat = dc.sum((reference.logF3 - dc.log(cv["flatness"] / 3.0)) ** 2)
    else:
        l_flat = dc.sum((reference.flatness - cv["flatness"]) ** 2)
    l_kl = ms.kl_to_standard_gaussian(u)
    total = alpha * (l_s2 + l_skew + l_flat) + beta * l_kl
    parts = {
        "loss": float(total.data),
        "loss_S2": float(l_s2.data),
        "loss_skew": float(l_skew.data),
        "loss_flat": float(l_flat.data),
        "loss_KL": float(l_kl.data),
        "guarded": cv["guarded"],
    }
    return total, parts


LOG_COLUMNS = ("epoch", "lr", "loss", "loss_S2", "loss_skew", "loss_flat", "loss_KL", "wall_time")


def recalibrate_bn(model, rng, batches, batch, length):
    """Reset running batch-norm statistics to exact averages over fresh noise.

    The exponential running average lags the weights, and the lag biases
    eval-mode outputs; a small constant offset in the increments turns into
    a drift of ``u`` that dominates S2 at large scales.  Here each layer's
    statistics become the plain mean over ``batches`` train-mode batches.
    Parameters are untouched.
    """
    saved = {name: st.momentum for name, st in model.bn.items()}
    try:
        for k in range(batches):
            for st in model.bn.values():
                st.momentum = 1.0 / (k + 1)
            model.forward(rng.standard_normal((batch, 1, length), dtype=model.dtype), "train")
    finally:
        for name, st in model.bn.items():
            st.momentum = saved[name]
    return model


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, **rec):
        self.records.append({k: rec[k] for k in LOG_COLUMNS})

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([r[name] for r in self.records])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for r in self.records:
                w.writerow({k: (r[k] if k == "epoch" else repr(float(r[k]))) for k in LOG_COLUMNS})
        return path


@dataclass
class TrainResult:
    model: object
    adam: dc.AdamState
    log: TrainLog
    checkpoint: str | None = None


def train(config, out_dir=None, progress=None):
    """Optimise a fresh U-net against the configured reference curves.

    Every epoch draws ``batch`` new noise realizations of length
    ``n_train + pad``.  Checkpoints go to ``out_dir`` every
    ``checkpoint_every`` epochs and at the end.  ``progress``, if given, is
    called with each log record.
    """
    config.validate()
    model = build_model(config.seed, config.precision)
    adam = dc.AdamState()
    history = TrainLog()
    rng = np.random.default_rng([config.seed, _NOISE_STREAM])
    reference = config.reference_curves()
    meta = {"train_config": config.as_dict()}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    def recalibrated(epoch):
        # saved models carry recalibrated statistics; training itself never reads them
        if config.bn_recalibration:
            recal = np.random.default_rng([config.seed, _RECAL_STREAM, epoch])
            recalibrate_bn(model, recal, config.bn_recalibration, config.batch, config.n_input)
        return model

    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config.lr_schedule)
        noise = rng.standard_normal((config.batch, 1, config.n_input), dtype=model.dtype)
        model.zero_grad()
        tape = dc.Tape()
        with tape:
            out = model.forward(noise, "train")
            loss, parts = compute_loss(out, reference, config.alpha, config.beta,
                                       n_keep=config.n_train, flatness_form=config.flatness_form)
        if not math.isfinite(parts["loss"]):
            path = None
            if out_dir:
                path = save_checkpoint(model, os.path.join(out_dir, "diverged.nntb"), adam=adam,
                                       meta={**meta, "epoch": epoch, "breakdown": parts})
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}: {parts}", checkpoint=path)
        dc.backward(loss, tape)
        dc.adam_step(model.parameters(), adam, lr)
        history.append(epoch=epoch, lr=lr, wall_time=time.perf_counter() - t0, **parts)
        if progress is not None:
            progress(history.records[-1])
        log.debug("epoch %d lr %.1e loss %.5g", epoch, lr, parts["loss"])
        if out_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0 \
                and epoch + 1 < config.epochs:
            save_checkpoint(recalibrated(epoch + 1), os.path.join(out_dir, f"checkpoint_{epoch + 1:05d}.nntb"),
                            adam=adam, meta={**meta, "epoch": epoch + 1})

    if config.epochs:
        recalibrated(config.epochs)
    path = None
    if out_dir:
        path = save_checkpoint(model, os.path.join(out_dir, "final.nntb"), adam=adam,
                               meta={**meta, "epoch": config.epochs})
        history.write_csv(os.path.join(out_dir, "train_log.csv"))
    return TrainResult(model=model, adam=adam, log=history, checkpoint=path)
