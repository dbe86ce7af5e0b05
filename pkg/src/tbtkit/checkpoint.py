"""Binary checkpoint and packed-export file formats.

Both files start with an 8-byte magic and a u32 format version, followed by a
length-prefixed JSON header holding the run and model configuration. All
integers and raw tensor bytes are little-endian.

Checkpoint body::

    tensor table   u32 count, then per entry: name, u8 dtype tag, u8 ndim,
                   ndim x u64 dims, raw bytes
    alpha table    u32 count, then per activation quantizer: name,
                   u8 initialized, u8 n, n x f64 values

Packed export body::

    u32 count, then per quantized matrix: name, kernels packed section
    tensor table   remaining full-precision tensors
    alpha table

Names are u16 length + UTF-8. Alpha values are ``[alpha]`` for learned
scales, ``[threshold, scale]`` for frozen baseline statistics and empty for
unquantized activations.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from . import kernels
from .model import ModelConfig, Seq2Seq
from .train import RunConfig

CHECKPOINT_MAGIC = b"TBTCKPT\0"
PACKED_MAGIC = b"TBTPACK\0"
VERSION = 1

_DTYPES = {0: "<f8", 1: "<f4", 2: "<i8", 3: "<i1"}
_TAGS = {np.dtype(v).str: k for k, v in _DTYPES.items()}

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class FormatError(ValueError):
    pass


# --- primitives -------------------------------------------------------------------------

def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError("truncated file")
    return data


def _read(f: BinaryIO, s: struct.Struct):
    return s.unpack(_read_exact(f, s.size))[0]


def _write_name(f: BinaryIO, name: str):
    raw = name.encode()
    f.write(_U16.pack(len(raw)) + raw)


def _read_name(f: BinaryIO) -> str:
    return _read_exact(f, _read(f, _U16)).decode()


def _write_header(f: BinaryIO, magic: bytes, model: Seq2Seq, run: RunConfig):
    f.write(magic + _U32.pack(VERSION))
    meta = json.dumps({"run": run.to_dict(), "model": model.cfg.to_dict()}, sort_keys=True).encode()
    f.write(_U32.pack(len(meta)) + meta)


def _read_header(f: BinaryIO, magic: bytes) -> tuple[RunConfig, ModelConfig]:
    if _read_exact(f, len(magic)) != magic:
        raise FormatError("bad magic: not a file of the expected kind")
    version = _read(f, _U32)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    meta = json.loads(_read_exact(f, _read(f, _U32)))
    return RunConfig.from_dict(meta["run"]), ModelConfig.from_dict(meta["model"])


def _write_tensors(f: BinaryIO, tensors: list[tuple[str, np.ndarray]]):
    f.write(_U32.pack(len(tensors)))
    for name, arr in tensors:
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        if le.dtype.str not in _TAGS:
            raise FormatError(f"unsupported dtype {arr.dtype} for {name}")
        _write_name(f, name)
        f.write(_U8.pack(_TAGS[le.dtype.str]) + _U8.pack(arr.ndim))
        for dim in arr.shape:
            f.write(_U64.pack(dim))
        f.write(np.ascontiguousarray(le).tobytes())


def _read_tensors(f: BinaryIO) -> dict[str, np.ndarray]:
    out = {}
    for _ in range(_read(f, _U32)):
        name = _read_name(f)
        tag = _read(f, _U8)
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag}")
        dtype = np.dtype(_DTYPES[tag])
        shape = tuple(_read(f, _U64) for _ in range(_read(f, _U8)))
        count = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(_read_exact(f, count * dtype.itemsize), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return out


def _alpha_entries(model: Seq2Seq):
    for name, act in model.act_quantizers():
        if act.alpha is not None:
            values = np.atleast_1d(act.alpha.data)
        elif act.fixed is not None:
            values = act.fixed
        else:
            values = np.zeros(0)
        yield name, act.initialized, np.asarray(values, dtype=np.float64)


def _write_alphas(f: BinaryIO, model: Seq2Seq):
    entries = list(_alpha_entries(model))
    f.write(_U32.pack(len(entries)))
    for name, initialized, values in entries:
        _write_name(f, name)
        f.write(_U8.pack(int(initialized)) + _U8.pack(values.size))
        f.write(values.astype("<f8").tobytes())


def _read_alphas(f: BinaryIO, model: Seq2Seq):
    acts = dict(model.act_quantizers())
    count = _read(f, _U32)
    if count != len(acts):
        raise FormatError(f"alpha table has {count} entries, model has {len(acts)}")
    for _ in range(count):
        name = _read_name(f)
        initialized = bool(_read(f, _U8))
        values = np.frombuffer(_read_exact(f, 8 * _read(f, _U8)), dtype="<f8").astype(np.float64)
        act = acts.get(name)
        if act is None:
            raise FormatError(f"unknown activation quantizer {name}")
        if act.alpha is not None:
            if values.size != 1:
                raise FormatError(f"{name}: expected one alpha value")
            act.alpha.data = np.asarray(values[0])
        elif act.fixed is not None:
            if values.size != 2:
                raise FormatError(f"{name}: expected threshold and scale")
            act.fixed = values.copy()
        act.initialized = initialized


def _is_act_alpha(name: str) -> bool:
    return name.endswith("act.alpha")


def _load_tensors(model: Seq2Seq, tensors: dict[str, np.ndarray], skip=()):
    params = {n: p for n, p in model.named_parameters() if not _is_act_alpha(n) and n not in skip}
    if set(tensors) != set(params):
        missing, extra = set(params) - set(tensors), set(tensors) - set(params)
        raise FormatError(f"tensor table mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, arr in tensors.items():
        if arr.shape != params[name].shape:
            raise FormatError(f"shape mismatch for {name}: {arr.shape} vs {params[name].shape}")
        params[name].data = arr.astype(np.float64)


# --- checkpoints ------------------------------------------------------------------------

def save_checkpoint(path, model: Seq2Seq, run: RunConfig) -> int:
    tensors = [(n, p.data) for n, p in model.named_parameters() if not _is_act_alpha(n)]
    with open(path, "wb") as f:
        _write_header(f, CHECKPOINT_MAGIC, model, run)
        _write_tensors(f, tensors)
        _write_alphas(f, model)
        return f.tell()


def load_checkpoint(path) -> tuple[Seq2Seq, RunConfig]:
    with open(path, "rb") as f:
        run, cfg = _read_header(f, CHECKPOINT_MAGIC)
        model = Seq2Seq(cfg, seed=run.seed)
        _load_tensors(model, _read_tensors(f))
        _read_alphas(f, model)
    model.eval()
    return model, run


# --- packed export ------------------------------------------------------------------------

@dataclass
class ExportSummary:
    path: str
    matrices: int
    elements: int
    packed_payload_bytes: int
    float32_payload_bytes: int
    file_bytes: int

    @property
    def ratio(self) -> float:
        return self.float32_payload_bytes / self.packed_payload_bytes

    def to_row(self) -> dict:
        return {"matrices": self.matrices, "elements": self.elements,
                "packed_payload_bytes": self.packed_payload_bytes,
                "float32_payload_bytes": self.float32_payload_bytes,
                "ratio": self.ratio, "file_bytes": self.file_bytes}


def pack_model(model: Seq2Seq) -> dict[str, kernels.PackedMatrix]:
    """Quantize and bit-pack every quantized matrix of ``model``."""
    from .model import quantize_weight

    mats = model.quantized_matrices()
    if not mats:
        raise ValueError("model has no quantized matrices to pack (all weights are 32-bit)")
    out = {}
    for name, param, kind in mats:
        if kind not in kernels.PACKABLE_KINDS:
            raise ValueError(f"{name}: {kind.value} weights cannot be bit-packed")
        out[name] = kernels.pack(quantize_weight(param.data, kind)[0])
    return out


def export_packed(path, model: Seq2Seq, run: RunConfig) -> ExportSummary:
    packed = pack_model(model)
    tensors = [(n, p.data) for n, p in model.named_parameters() if not _is_act_alpha(n) and n not in packed]
    with open(path, "wb") as f:
        _write_header(f, PACKED_MAGIC, model, run)
        f.write(_U32.pack(len(packed)))
        for name, p in packed.items():
            _write_name(f, name)
            kernels.write_packed(f, p)
        _write_tensors(f, tensors)
        _write_alphas(f, model)
    elements = sum(p.rows * p.cols for p in packed.values())
    return ExportSummary(
        path=str(path),
        matrices=len(packed),
        elements=elements,
        packed_payload_bytes=sum(p.payload_bytes() for p in packed.values()),
        float32_payload_bytes=4 * elements,
        file_bytes=os.path.getsize(path),
    )


def load_packed(path) -> tuple[Seq2Seq, RunConfig]:
    with open(path, "rb") as f:
        run, cfg = _read_header(f, PACKED_MAGIC)
        model = Seq2Seq(cfg, seed=run.seed)
        packed = {}
        for _ in range(_read(f, _U32)):
            name = _read_name(f)
            packed[name] = kernels.read_packed(f)
        _load_tensors(model, _read_tensors(f), skip=set(packed))
        _read_alphas(f, model)
    model.attach_packed(packed)
    model.eval()
    return model, run
