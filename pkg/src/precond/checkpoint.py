"""Binary checkpointing of optimizer state, bit-exact in storage precision.

Layout (all integers little-endian):

    magic  "KPRC" (4 bytes)
    version u16
    layer_count u32
    per layer:
        parametrization u8   (0 = old/ambient, 1 = new/rotated)
        method u8            (0 = kl-shampoo, 1 = kl-soap, 2 = soap)
        tensors, each:
            dtype u8         (0 = FP64, 1 = FP32, 2 = BF16)
            rank u8
            dims u32 * rank
            raw little-endian buffer

The tensor sequence of a layer is fixed by its method: a rank-0 FP64
step counter, then theta, lam1, Q1, companion1, lam2, Q2, companion2,
and for SOAP-type methods the two moment matrices. BF16 buffers are the
raw uint16 bit patterns, so a save/load round trip is bitwise exact.
"""

from __future__ import annotations

import struct
from dataclasses import replace

import numpy as np

from .matcore import Precision, StorageMatrix
from .shampoo import (
    FactorState,
    LayerState,
    Method,
    OptimConfig,
    Parametrization,
    init_layer,
)

MAGIC = b"KPRC"
VERSION = 1

_PARAM_CODE = {Parametrization.OLD: 0, Parametrization.NEW: 1}
_METHOD_CODE = {Method.KL_SHAMPOO: 0, Method.KL_SOAP: 1, Method.SOAP: 2}
_DTYPE_CODE = {Precision.FP64: 0, Precision.FP32: 1, Precision.BF16: 2}
_CODE_PARAM = {v: k for k, v in _PARAM_CODE.items()}
_CODE_METHOD = {v: k for k, v in _METHOD_CODE.items()}
_CODE_DTYPE = {v: k for k, v in _DTYPE_CODE.items()}
_WIRE_DTYPE = {
    Precision.FP64: np.dtype("<f8"),
    Precision.FP32: np.dtype("<f4"),
    Precision.BF16: np.dtype("<u2"),
}


class CheckpointFormatError(ValueError):
    """Magic bytes, version, or a field code is not what it should be."""


class PrecisionMismatchError(CheckpointFormatError):
    """Checkpoint tensors are stored in a different precision than the
    run is configured for."""


def checkpoint_save(path, states: list[LayerState]):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(states)))
        for state in states:
            cfg = state.config
            fh.write(struct.pack("<BB", _PARAM_CODE[cfg.parametrization],
                                 _METHOD_CODE[cfg.method]))
            _write_tensor(fh, StorageMatrix.store(
                np.float64(state.step_count), Precision.FP64))
            for tensor in _layer_tensors(state):
                _write_tensor(fh, tensor)


def checkpoint_load(path, config: OptimConfig | None = None) -> list[LayerState]:
    """Rebuild layer states from a checkpoint.

    When ``config`` is given, its storage precision, parametrization, and
    method must match the file (a BF16 checkpoint cannot be loaded into an
    FP32-configured run); otherwise a default config is derived from the
    file's own codes.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = _Reader(raw)
    if buf.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic bytes; not a checkpoint file")
    version, n_layers = struct.unpack("<HI", buf.take(6))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    states = []
    for li in range(n_layers):
        pcode, mcode = struct.unpack("<BB", buf.take(2))
        if pcode not in _CODE_PARAM or mcode not in _CODE_METHOD:
            raise CheckpointFormatError(
                f"layer {li}: unknown parametrization/method codes {pcode}/{mcode}")
        param = _CODE_PARAM[pcode]
        method = _CODE_METHOD[mcode]
        step_count = int(_read_tensor(buf).load())
        theta = _read_tensor(buf)
        storage = theta.precision
        factors = []
        for _ in range(2):
            lam = _read_tensor(buf)
            basis = _read_tensor(buf)
            comp = _read_tensor(buf)
            factors.append((lam, basis, comp))
        moments_raw = None
        if method.is_soap_type:
            moments_raw = (_read_tensor(buf), _read_tensor(buf))
        if config is not None:
            if config.storage is not storage:
                raise PrecisionMismatchError(
                    f"layer {li} stored as {storage.value}, run configured for "
                    f"{config.storage.value}")
            if config.parametrization is not param or config.method is not method:
                raise CheckpointFormatError(
                    f"layer {li} was written by {method.value}/{param.value}, "
                    f"run configured for {config.method.value}/{config.parametrization.value}")
            cfg = config
        else:
            cfg = OptimConfig(method=method, parametrization=param, storage=storage)
        d1 = factors[0][1].rows
        d2 = factors[1][1].rows
        state = init_layer(d1, d2, cfg, seed=cfg.seed + li)
        state.theta = theta
        state.step_count = step_count
        for factor, (lam, basis, comp) in zip(state.factors, factors):
            factor.eigvals = lam
            factor.basis = basis
            factor.companion = comp
        if moments_raw is not None:
            state.moments.m, state.moments.v = moments_raw
            state.moments.t = step_count
        states.append(state)
    if buf.remaining():
        raise CheckpointFormatError(f"{buf.remaining()} trailing bytes after last layer")
    return states


def describe(path) -> dict:
    """Header and per-tensor metadata, for the ckpt-dump command."""
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = _Reader(raw)
    if buf.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic bytes; not a checkpoint file")
    version, n_layers = struct.unpack("<HI", buf.take(6))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    layers = []
    names = ["step_count", "theta", "lam1", "Q1", "companion1", "lam2", "Q2", "companion2"]
    for _ in range(n_layers):
        pcode, mcode = struct.unpack("<BB", buf.take(2))
        method = _CODE_METHOD.get(mcode)
        tensor_names = list(names) + (["m", "v"] if method and method.is_soap_type else [])
        tensors = []
        for name in tensor_names:
            t = _read_tensor(buf)
            tensors.append({"name": name, "dtype": t.precision.value, "shape": t.shape})
        layers.append({
            "parametrization": _CODE_PARAM.get(pcode, pcode).value
            if pcode in _CODE_PARAM else pcode,
            "method": method.value if method else mcode,
            "tensors": tensors,
        })
    return {"version": version, "layer_count": n_layers, "layers": layers}


def _layer_tensors(state: LayerState):
    yield state.theta
    for factor in state.factors:
        yield factor.eigvals
        yield factor.basis
        yield factor.companion
    if state.moments is not None:
        yield state.moments.m
        yield state.moments.v


def _write_tensor(fh, tensor: StorageMatrix):
    arr = tensor.data
    fh.write(struct.pack("<BB", _DTYPE_CODE[tensor.precision], arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(arr, dtype=_WIRE_DTYPE[tensor.precision]).tobytes())


def _read_tensor(buf: "_Reader") -> StorageMatrix:
    dcode, rank = struct.unpack("<BB", buf.take(2))
    if dcode not in _CODE_DTYPE:
        raise CheckpointFormatError(f"unknown tensor dtype code {dcode}")
    precision = _CODE_DTYPE[dcode]
    dims = struct.unpack(f"<{rank}I", buf.take(4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    wire = _WIRE_DTYPE[precision]
    data = np.frombuffer(buf.take(count * wire.itemsize), dtype=wire).reshape(dims)
    return StorageMatrix(np.ascontiguousarray(data).astype(precision.storage_dtype),
                         precision)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise IOError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.raw)}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def remaining(self) -> int:
        return len(self.raw) - self.pos
