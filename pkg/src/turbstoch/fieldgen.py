"""Generation and storage of field ensembles from a trained U-net."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    ShapeError,
    TruncatedFileError,
    UnsupportedFormatError,
    VersionMismatchError,
)
from .unet import model_digest

DEFAULT_PAD = 8192

FIELD_MAGIC = b"NNTF"
FIELD_VERSION = 1
_HEADER = struct.Struct("<4sIQQBQ32s")
_BIG_ENDIAN_BIT = 0x80
_DTYPE_FLAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_FLAG_BY_DTYPE = {v: k for k, v in _DTYPE_FLAGS.items()}


@dataclass
class FieldEnsemble:
    """R realizations of length N with their provenance."""

    data: np.ndarray
    base_seed: int = 0
    checkpoint_hash: bytes = bytes(32)
    sampling_distance: float = 1.0

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data))
        if self.data.ndim != 2:
            raise ShapeError("ensemble data must be (R, N)")
        if len(self.checkpoint_hash) != 32:
            raise FormatError("checkpoint hash must be 32 bytes")

    @property
    def realizations(self):
        return self.data.shape[0]

    @property
    def length(self):
        return self.data.shape[1]


def derive_seed(base_seed, index):
    """Per-realization seed: a pure function of the base seed and the index."""
    ss = np.random.SeedSequence(int(base_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _noise(seed, n_in, dtype):
    return np.random.default_rng(seed).standard_normal(n_in, dtype=dtype)


def _integrate(model, noise, n, pad):
    """Forward a (R, n + pad) noise batch, trim pad/2 per side, cumulative sum."""
    inc = model.forward(noise[:, None, :], "eval").data[:, 0, :]
    half = pad // 2
    return np.cumsum(inc[:, half:half + n].astype(np.float64), axis=1)


def _check_lengths(model, n, pad):
    if n < 1 or pad < 0 or pad % 2:
        raise ShapeError(f"invalid field length {n} / pad {pad}")
    if (n + pad) % model.spec.length_multiple:
        raise ShapeError(f"input length {n + pad} not divisible by {model.spec.length_multiple}")


def generate_field(model, seed, n, pad=DEFAULT_PAD):
    """One realization of u: noise of length ``n + pad`` through the model in eval mode.

    ``pad // 2`` increments are dropped at each border before integrating.
    """
    _check_lengths(model, n, pad)
    return _integrate(model, _noise(seed, n + pad, model.dtype)[None, :], n, pad)[0]


def generate_ensemble(model, base_seed, realizations, n, pad=DEFAULT_PAD, batch=8):
    """``realizations`` independent fields, realization r seeded by ``derive_seed(base_seed, r)``."""
    _check_lengths(model, n, pad)
    out = np.empty((realizations, n))
    for s in range(0, realizations, batch):
        idx = range(s, min(realizations, s + batch))
        noise = np.stack([_noise(derive_seed(base_seed, r), n + pad, model.dtype) for r in idx])
        out[s:s + len(idx)] = _integrate(model, noise, n, pad)
    return FieldEnsemble(out, base_seed=int(base_seed), checkpoint_hash=model_digest(model))


def fields_bytes(ensemble, dtype=np.float64):
    dt = np.dtype(dtype).newbyteorder("<")
    header = _HEADER.pack(FIELD_MAGIC, FIELD_VERSION, ensemble.realizations, ensemble.length,
                          _FLAG_BY_DTYPE[dt], int(ensemble.base_seed), bytes(ensemble.checkpoint_hash))
    return header + np.ascontiguousarray(ensemble.data, dtype=dt).tobytes()


def write_fields(ensemble, path, dtype=np.float64):
    with open(path, "wb") as fh:
        fh.write(fields_bytes(ensemble, dtype))
    return path


def parse_fields(data):
    if len(data) < 4 or data[:4] != FIELD_MAGIC:
        raise BadMagicError("not an NNTF field file (bad magic)")
    if len(data) < _HEADER.size:
        raise TruncatedFileError("field file header truncated")
    _, version, r, n, flag, seed, digest = _HEADER.unpack_from(data)
    if version != FIELD_VERSION:
        raise VersionMismatchError(f"field file version {version}, expected {FIELD_VERSION}")
    if flag & _BIG_ENDIAN_BIT:
        raise UnsupportedFormatError("big-endian field files are not supported")
    if flag not in _DTYPE_FLAGS:
        raise UnsupportedFormatError(f"unknown dtype flag {flag}")
    dt = _DTYPE_FLAGS[flag]
    expected = r * n * dt.itemsize
    payload = len(data) - _HEADER.size
    if payload < expected:
        raise TruncatedFileError(f"header announces {r}x{n} values, payload holds {payload // dt.itemsize}")
    if payload > expected:
        raise FormatError(f"{payload - expected} trailing bytes after the field payload")
    values = np.frombuffer(data, dtype=dt, count=r * n, offset=_HEADER.size).reshape(r, n)
    return FieldEnsemble(values.astype(np.float64), base_seed=seed, checkpoint_hash=digest)


def read_fields(path):
    with open(path, "rb") as fh:
        return parse_fields(fh.read())
