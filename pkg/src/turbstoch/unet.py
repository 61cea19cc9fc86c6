"""Fully-convolutional 1-D U-net mapping white noise to velocity increments.

The default layout: four encoder blocks (conv, batch norm, ReLU, average
pooling) with kernels 1, 2, 4, 8; a bridge of a k=16 convolution and a
k=16 transposed convolution at the coarsest resolution; four decoder blocks
(upsampling, additive skip, transposed conv, batch norm, ReLU) with
kernels 8, 16, 32, 64.  The last decoder block has no ReLU so that the
produced increments can be negative.  Channel widths run
1-16-32-64-128-256-128-64-32-16-1.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import (
    BadMagicError,
    ContractError,
    FormatError,
    ShapeError,
    SpecHashMismatchError,
    TruncatedFileError,
    UninitializedStatsError,
    VersionMismatchError,
)

ALLOWED_KERNELS = (1, 2, 4, 8, 16, 32, 64)

CHECKPOINT_MAGIC = b"NNTB"
CHECKPOINT_VERSION = 1

PRECISIONS = {"float32": (1, np.float32), "float64": (2, np.float64)}
_PRECISION_BY_FLAG = {flag: name for name, (flag, _) in PRECISIONS.items()}


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" or "tconv"
    c_in: int
    c_out: int
    kernel: int
    relu: bool = True


@dataclass(frozen=True)
class ModelSpec:
    encoder: tuple
    bridge: tuple
    decoder: tuple
    skips: tuple  # (encoder block, decoder block) pairs
    factor: int = 2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    @property
    def n_levels(self):
        return len(self.encoder)

    @property
    def length_multiple(self):
        return self.factor ** self.n_levels

    def layers(self):
        """(name, LayerSpec) for every convolutional layer in execution order."""
        out = [(f"enc{i}", s) for i, s in enumerate(self.encoder)]
        out += [("bridge0", self.bridge[0]), ("bridge1", self.bridge[1])]
        out += [(f"dec{i}", s) for i, s in enumerate(self.decoder)]
        return out

    def channel_trace(self):
        layers = [s for _, s in self.layers()]
        return [layers[0].c_in] + [s.c_out for s in layers]

    def validate(self):
        if self.factor != 2:
            raise ContractError("only a pooling/upsampling factor of 2 is supported")
        if len(self.encoder) != len(self.decoder):
            raise ContractError("encoder and decoder must have the same number of blocks")
        if len(self.bridge) != 2:
            raise ContractError("bridge must hold exactly two layers")
        layers = [s for _, s in self.layers()]
        for prev, nxt in zip(layers, layers[1:]):
            if prev.c_out != nxt.c_in:
                raise ContractError(f"channel mismatch between layers: {prev} -> {nxt}")
        for s in layers:
            if s.kernel not in ALLOWED_KERNELS:
                raise ContractError(f"kernel size {s.kernel} not in {ALLOWED_KERNELS}")
            if s.kind not in ("conv", "tconv"):
                raise ContractError(f"unknown layer kind {s.kind!r}")
        n = self.n_levels
        for i, j in self.skips:
            if i + j != n - 1:
                raise ContractError(f"skip ({i}, {j}) joins tensors of different lengths")
            if self.encoder[i].c_out != self.decoder[j].c_in:
                raise ContractError(f"skip ({i}, {j}) joins tensors of different widths")
        return self

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        return cls(
            encoder=tuple(LayerSpec(**d) for d in raw["encoder"]),
            bridge=tuple(LayerSpec(**d) for d in raw["bridge"]),
            decoder=tuple(LayerSpec(**d) for d in raw["decoder"]),
            skips=tuple(tuple(p) for p in raw["skips"]),
            factor=raw["factor"],
            bn_momentum=raw["bn_momentum"],
            bn_eps=raw["bn_eps"],
        )

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).digest()

    def parameter_count(self):
        total = 0
        for _, s in self.layers():
            total += s.c_in * s.c_out * s.kernel + s.c_out  # weights + bias
            total += 2 * s.c_out  # batch-norm gamma, beta
        return total


def default_spec():
    return ModelSpec(
        encoder=(
            LayerSpec("conv", 1, 16, 1),
            LayerSpec("conv", 16, 32, 2),
            LayerSpec("conv", 32, 64, 4),
            LayerSpec("conv", 64, 128, 8),
        ),
        bridge=(
            LayerSpec("conv", 128, 256, 16),
            LayerSpec("tconv", 256, 128, 16),
        ),
        decoder=(
            LayerSpec("tconv", 128, 64, 8),
            LayerSpec("tconv", 64, 32, 16),
            LayerSpec("tconv", 32, 16, 32),
            LayerSpec("tconv", 16, 1, 64, relu=False),
        ),
        skips=((3, 0), (2, 1), (1, 2), (0, 3)),
    ).validate()


class UNetModel:
    """Parameters, batch-norm running statistics and forward pass of the U-net."""

    def __init__(self, spec, seed=0, precision="float64"):
        if precision not in PRECISIONS:
            raise ContractError(f"unknown precision {precision!r}")
        self.spec = spec.validate()
        self.seed = int(seed)
        self.precision = precision
        self.params = {}
        self.bn = {}
        dtype = self.dtype
        rng = np.random.default_rng(self.seed)
        for name, s in spec.layers():
            shape = (s.c_out, s.c_in, s.kernel) if s.kind == "conv" else (s.c_in, s.c_out, s.kernel)
            # fan-in of both layouts is c_in * kernel; ReLU gain sqrt(2)
            bound = math.sqrt(2.0) * math.sqrt(3.0 / (s.c_in * s.kernel))
            w = rng.uniform(-bound, bound, size=shape).astype(dtype)
            self._add(f"{name}.weight", w)
            self._add(f"{name}.bias", np.zeros(s.c_out, dtype))
            self._add(f"{name}.bn.gamma", np.ones(s.c_out, dtype))
            self._add(f"{name}.bn.beta", np.zeros(s.c_out, dtype))
            self.bn[name] = dc.BatchNormStats(momentum=spec.bn_momentum, eps=spec.bn_eps)

    def _add(self, name, value):
        self.params[name] = dc.Parameter(value, name)

    @property
    def dtype(self):
        return PRECISIONS[self.precision][1]

    def parameters(self):
        return list(self.params.values())

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def parameter_vector(self):
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])

    @property
    def stats_initialized(self):
        return all(st.initialized for st in self.bn.values())

    def _layer(self, name, s, x, mode):
        p = self.params
        op = dc.conv1d if s.kind == "conv" else dc.conv_transpose1d
        y = op(x, p[f"{name}.weight"], p[f"{name}.bias"])
        y = dc.batch_norm1d(y, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"], self.bn[name], mode)
        return dc.relu(y) if s.relu else y

    def forward(self, w, mode="train", trace=None):
        """Map noise ``w`` of shape (batch, 1, length) to increments of the same shape.

        ``trace``, when a list, receives the channel count of the input and of
        every layer output.
        """
        if mode not in ("train", "eval"):
            raise ContractError(f"unknown mode {mode!r}")
        if not isinstance(w, dc.Tensor):
            w = dc.Tensor(np.asarray(w))
        if w.ndim != 3 or w.shape[1] != self.spec.encoder[0].c_in:
            raise ShapeError(f"expected input of shape (batch, {self.spec.encoder[0].c_in}, length), got {w.shape}")
        n = w.shape[2]
        if n % self.spec.length_multiple:
            raise ShapeError(f"input length {n} not divisible by {self.spec.length_multiple}")
        if mode == "eval" and not self.stats_initialized:
            raise UninitializedStatsError("model has no batch-norm running statistics; train it first")
        if w.dtype != self.dtype:
            w = dc.cast(w, self.dtype)
        if trace is not None:
            trace.append(w.shape[1])

        skip_for = {j: i for i, j in self.spec.skips}
        taps = {}
        h = w
        for i, s in enumerate(self.spec.encoder):
            h = self._layer(f"enc{i}", s, h, mode)
            taps[i] = h
            if trace is not None:
                trace.append(h.shape[1])
            h = dc.avg_pool1d(h)
        for k, s in enumerate(self.spec.bridge):
            h = self._layer(f"bridge{k}", s, h, mode)
            if trace is not None:
                trace.append(h.shape[1])
        for j, s in enumerate(self.spec.decoder):
            h = dc.upsample1d(h)
            if j in skip_for:
                h = h + taps[skip_for[j]]
            h = self._layer(f"dec{j}", s, h, mode)
            if trace is not None:
                trace.append(h.shape[1])
        return h

    __call__ = forward


def build_model(seed=0, precision="float64", spec=None):
    """Fresh model with fan-in scaled uniform weights, zero biases and unit BN scale."""
    return UNetModel(spec or default_spec(), seed=seed, precision=precision)


def forward(model, w, mode="train"):
    return model.forward(w, mode)


# ----------------------------------------------------------------------------
# Checkpoint container
# ----------------------------------------------------------------------------

_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_DTYPE_BY_CODE = {v: k for k, v in _DTYPE_CODES.items()}


def _pack_tensors(items):
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        key = name.encode()
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"file truncated: needed {n} bytes at offset {self.pos}, only {len(self.data) - self.pos} left")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def exhausted(self):
        return self.pos >= len(self.data)


def _unpack_tensors(payload):
    r = _Reader(payload)
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPE_BY_CODE:
            raise FormatError(f"unknown dtype code {code} for tensor {name!r}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        dt = _DTYPE_BY_CODE[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).copy()
    return out


def _section(name, payload):
    key = name.encode()
    return struct.pack("<H", len(key)) + key + struct.pack("<Q", len(payload)) + payload


def checkpoint_bytes(model, adam=None, meta=None):
    """Serialise ``model`` (and optionally Adam state and JSON metadata)."""
    flag = PRECISIONS[model.precision][0]
    header = (CHECKPOINT_MAGIC
              + struct.pack("<I", CHECKPOINT_VERSION)
              + model.spec.digest()
              + struct.pack("<QBQ", model.seed, flag, model.parameter_count()))
    parts = [header,
             _section("spec", model.spec.to_json().encode()),
             _section("params", _pack_tensors([(k, p.data) for k, p in model.params.items()]))]
    bn_items = []
    for name, st in model.bn.items():
        if st.initialized:
            bn_items += [(f"{name}.mean", st.mean), (f"{name}.var", st.var)]
    parts.append(_section("bn", _pack_tensors(bn_items)))
    if adam is not None:
        head = json.dumps({"t": adam.t, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}).encode()
        tensors = [(f"m.{k}", v) for k, v in adam.m.items()] + [(f"v.{k}", v) for k, v in adam.v.items()]
        parts.append(_section("adam", struct.pack("<I", len(head)) + head + _pack_tensors(tensors)))
    if meta is not None:
        parts.append(_section("meta", json.dumps(meta, sort_keys=True).encode()))
    return b"".join(parts)


def model_digest(model):
    """SHA-256 of the model-only checkpoint bytes; used as field provenance."""
    return hashlib.sha256(checkpoint_bytes(model)).digest()


def save_checkpoint(model, path, adam=None, meta=None):
    data = checkpoint_bytes(model, adam=adam, meta=meta)
    with open(path, "wb") as fh:
        fh.write(data)
    return path


@dataclass
class Checkpoint:
    model: UNetModel
    adam: dc.AdamState | None = None
    meta: dict = field(default_factory=dict)


def parse_checkpoint(data):
    r = _Reader(data)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise BadMagicError("not an NNTB checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    spec_hash = r.take(32)
    seed, flag, n_params = r.unpack("<QBQ")
    if flag not in _PRECISION_BY_FLAG:
        raise FormatError(f"unknown precision flag {flag}")
    sections = {}
    while not r.exhausted:
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (length,) = r.unpack("<Q")
        sections[name] = r.take(length)
    for required in ("spec", "params", "bn"):
        if required not in sections:
            raise TruncatedFileError(f"checkpoint lacks the {required!r} section")

    spec = ModelSpec.from_json(sections["spec"].decode())
    if spec.digest() != spec_hash:
        raise SpecHashMismatchError("stored spec does not match the header spec hash")
    if spec.parameter_count() != n_params:
        raise SpecHashMismatchError(
            f"header parameter count {n_params} differs from the spec-derived {spec.parameter_count()}")

    model = UNetModel(spec, seed=seed, precision=_PRECISION_BY_FLAG[flag])
    params = _unpack_tensors(sections["params"])
    if set(params) != set(model.params):
        raise FormatError("parameter names do not match the model spec")
    for name, arr in params.items():
        if arr.shape != model.params[name].shape:
            raise FormatError(f"parameter {name!r} has shape {arr.shape}, expected {model.params[name].shape}")
        model.params[name].data = arr.astype(model.dtype, copy=False)
    stats = _unpack_tensors(sections["bn"])
    for name, st in model.bn.items():
        if f"{name}.mean" in stats:
            st.mean = stats[f"{name}.mean"]
            st.var = stats[f"{name}.var"]

    adam = None
    if "adam" in sections:
        payload = sections["adam"]
        (hlen,) = struct.unpack("<I", payload[:4])
        head = json.loads(payload[4:4 + hlen].decode())
        tensors = _unpack_tensors(payload[4 + hlen:])
        adam = dc.AdamState(beta1=head["beta1"], beta2=head["beta2"], eps=head["eps"], t=head["t"])
        for key, arr in tensors.items():
            kind, pname = key.split(".", 1)
            (adam.m if kind == "m" else adam.v)[pname] = arr
    meta = json.loads(sections["meta"].decode()) if "meta" in sections else {}
    return Checkpoint(model=model, adam=adam, meta=meta)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
