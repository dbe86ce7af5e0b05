"""Bit-plane packing and multiplication-free GEMM for binary/ternary matrices.

Element ``i`` of a row lives at bit ``i % 64`` of word ``i // 64``; words are
little-endian uint64 and padding bits past ``cols`` are always zero.
"""

from __future__ import annotations

import enum
import struct
import time
from dataclasses import dataclass
from typing import BinaryIO

import numba
import numpy as np
from llvmlite import ir
from numba import types
from numba.extending import intrinsic

from .quantcore import QuantKind, QuantizedTensor, QuantScheme

WORD_BITS = 64
MAX_COLS = 2**31 - 1


class PackScheme(enum.IntEnum):
    BINARY = 0
    TERNARY = 1
    BINARY_NONNEG = 2
    TERNARY_NONNEG = 3


_SCHEME_OF_KIND = {
    QuantKind.BINARY_WEIGHT: PackScheme.BINARY,
    QuantKind.BINARY_ACT_SIGNED: PackScheme.BINARY,
    QuantKind.BASELINE_BWN: PackScheme.BINARY,
    QuantKind.TERNARY_WEIGHT: PackScheme.TERNARY,
    QuantKind.TERNARY_ACT_SIGNED: PackScheme.TERNARY,
    QuantKind.BASELINE_TWN: PackScheme.TERNARY,
    QuantKind.BINARY_ACT_NONNEG: PackScheme.BINARY_NONNEG,
    QuantKind.TERNARY_ACT_NONNEG: PackScheme.TERNARY_NONNEG,
}

PACKABLE_KINDS = frozenset(_SCHEME_OF_KIND)

_KIND_OF_SCHEME = {
    PackScheme.BINARY: QuantKind.BINARY_WEIGHT,
    PackScheme.TERNARY: QuantKind.TERNARY_WEIGHT,
    PackScheme.BINARY_NONNEG: QuantKind.BINARY_ACT_NONNEG,
    PackScheme.TERNARY_NONNEG: QuantKind.TERNARY_ACT_NONNEG,
}

# planes written to disk, in order
_STORED_PLANES = {
    PackScheme.BINARY: ("plane_pos",),
    PackScheme.TERNARY: ("plane_pos", "plane_neg"),
    PackScheme.BINARY_NONNEG: ("plane_pos",),
    PackScheme.TERNARY_NONNEG: ("plane_pos", "plane_two"),
}


def words_for(cols: int) -> int:
    return (cols + WORD_BITS - 1) // WORD_BITS


@dataclass
class PackedMatrix:
    rows: int
    cols: int
    scheme: PackScheme
    plane_pos: np.ndarray
    plane_neg: np.ndarray
    row_scales: np.ndarray
    plane_two: np.ndarray | None = None

    @property
    def words(self) -> int:
        return self.plane_pos.shape[1]

    def signed_planes(self) -> list[tuple[np.ndarray, int]]:
        """(plane, coefficient) pairs whose weighted sum reconstructs the levels."""
        if self.scheme is PackScheme.TERNARY_NONNEG:
            return [(self.plane_pos, 1), (self.plane_two, 2)]
        if self.scheme is PackScheme.BINARY_NONNEG:
            return [(self.plane_pos, 1)]
        return [(self.plane_pos, 1), (self.plane_neg, -1)]

    def payload_bytes(self) -> int:
        planes = sum(getattr(self, name).nbytes for name in _STORED_PLANES[self.scheme])
        return planes + 4 * self.rows


def _pack_bits(mask: np.ndarray) -> np.ndarray:
    rows, cols = mask.shape
    padded = np.zeros((rows, words_for(cols) * WORD_BITS), dtype=bool)
    padded[:, :cols] = mask
    return np.packbits(padded, axis=1, bitorder="little").view("<u8").astype(np.uint64)


def _unpack_bits(plane: np.ndarray, cols: int) -> np.ndarray:
    raw = plane.astype("<u8").view(np.uint8)
    return np.unpackbits(raw, axis=1, bitorder="little")[:, :cols].astype(bool)


def valid_mask(cols: int) -> np.ndarray:
    return _pack_bits(np.ones((1, cols), dtype=bool))[0]


def pack(q: QuantizedTensor) -> PackedMatrix:
    try:
        scheme = _SCHEME_OF_KIND[q.scheme.kind]
    except KeyError:
        raise ValueError(f"cannot pack scheme {q.scheme.kind.value}") from None
    levels = np.asarray(q.qvals)
    if levels.ndim != 2:
        raise ValueError("pack expects a 2-d matrix of levels")
    rows, cols = levels.shape
    if cols > MAX_COLS:
        raise ValueError("too many columns for 32-bit accumulation")
    alpha = np.asarray(q.alpha, dtype=np.float64)
    scales = np.full(rows, alpha.item()) if alpha.size == 1 else alpha.reshape(rows).copy()
    plane_two = None
    if scheme is PackScheme.TERNARY_NONNEG:
        pos = _pack_bits(levels == 1)
        plane_two = _pack_bits(levels == 2)
        neg = np.zeros_like(pos)
    elif scheme is PackScheme.BINARY_NONNEG:
        pos = _pack_bits(levels == 1)
        neg = np.zeros_like(pos)
    else:
        pos = _pack_bits(levels == 1)
        neg = _pack_bits(levels == -1)
    return PackedMatrix(rows, cols, scheme, pos, neg, scales, plane_two)


def unpack(p: PackedMatrix) -> QuantizedTensor:
    levels = np.zeros((p.rows, p.cols), dtype=np.int8)
    for plane, coef in p.signed_planes():
        levels += coef * _unpack_bits(plane, p.cols).astype(np.int8)
    kind = _KIND_OF_SCHEME[p.scheme]
    return QuantizedTensor(levels, p.row_scales.reshape(-1, 1).copy(),
                           np.zeros((p.rows, 1)), QuantScheme(kind))


# --- popcount kernels -------------------------------------------------------------

@intrinsic
def _popcount(typingctx, x):
    sig = types.uint64(types.uint64)

    def codegen(context, builder, signature, args):
        fn = builder.module.declare_intrinsic("llvm.ctpop", [ir.IntType(64)])
        return builder.call(fn, args)

    return sig, codegen


@numba.njit(cache=True)
def _xor_popcount(a, bt, n):
    # a: (M, W) weight words; bt: (W, N) activation words, transposed
    m, w = a.shape
    cols = bt.shape[1]
    out = np.empty((m, cols), np.int64)
    acc = np.empty(cols, np.uint64)
    for i in range(m):
        acc[:] = 0
        for k in range(w):
            word = a[i, k]
            row = bt[k]
            for j in range(cols):
                acc[j] += _popcount(word ^ row[j])
        for j in range(cols):
            out[i, j] = n - 2 * np.int64(acc[j])
    return out


@numba.njit(cache=True)
def _and_popcount(a, bt):
    m, w = a.shape
    cols = bt.shape[1]
    out = np.empty((m, cols), np.int64)
    acc = np.empty(cols, np.uint64)
    for i in range(m):
        acc[:] = 0
        for k in range(w):
            word = a[i, k]
            row = bt[k]
            for j in range(cols):
                acc[j] += _popcount(word & row[j])
        for j in range(cols):
            out[i, j] = np.int64(acc[j])
    return out


def _check_pair(w: PackedMatrix, x: PackedMatrix):
    if w.cols != x.cols:
        raise ValueError(f"inner dimension mismatch: {w.cols} vs {x.cols}")


def masked_popcount_raw(w: PackedMatrix, x: PackedMatrix) -> np.ndarray:
    """Integer dot products for any scheme pair via plane-wise AND-popcount."""
    _check_pair(w, x)
    raw = np.zeros((w.rows, x.rows), dtype=np.int64)
    for wp, wc in w.signed_planes():
        for xp, xc in x.signed_planes():
            raw += wc * xc * _and_popcount(wp, np.ascontiguousarray(xp.T))
    return raw


def binary_gemm_raw(w: PackedMatrix, x: PackedMatrix) -> np.ndarray:
    _check_pair(w, x)
    if w.scheme is not PackScheme.BINARY:
        raise ValueError("binary_gemm needs binary weights")
    if x.scheme is PackScheme.BINARY:
        return _xor_popcount(w.plane_pos, np.ascontiguousarray(x.plane_pos.T), w.cols)
    if x.scheme is PackScheme.BINARY_NONNEG:
        xt = np.ascontiguousarray(x.plane_pos.T)
        return _and_popcount(w.plane_pos, xt) - _and_popcount(w.plane_neg, xt)
    raise ValueError(f"binary_gemm does not accept {x.scheme.name} activations")


def ternary_gemm_raw(w: PackedMatrix, x: PackedMatrix) -> np.ndarray:
    _check_pair(w, x)
    if w.scheme is not PackScheme.TERNARY:
        raise ValueError("ternary_gemm needs ternary weights")
    if x.scheme not in (PackScheme.TERNARY, PackScheme.TERNARY_NONNEG):
        raise ValueError(f"ternary_gemm does not accept {x.scheme.name} activations")
    return masked_popcount_raw(w, x)


@numba.njit(cache=True)
def _scale(raw, w_scales, x_scales):
    m, n = raw.shape
    out = np.empty((m, n), np.float64)
    for i in range(m):
        ws = w_scales[i]
        for j in range(n):
            out[i, j] = (np.float64(raw[i, j]) * x_scales[j]) * ws
    return out


def scale_raw(raw: np.ndarray, w: PackedMatrix, x: PackedMatrix) -> np.ndarray:
    # (raw * x_scale) * w_scale, the same order the fake-quant linear uses
    return _scale(np.ascontiguousarray(raw, dtype=np.int64), np.ascontiguousarray(w.row_scales, dtype=np.float64),
                  np.ascontiguousarray(x.row_scales, dtype=np.float64))


def binary_gemm(w: PackedMatrix, x: PackedMatrix) -> np.ndarray:
    return scale_raw(binary_gemm_raw(w, x), w, x)


def ternary_gemm(w: PackedMatrix, x: PackedMatrix) -> np.ndarray:
    return scale_raw(ternary_gemm_raw(w, x), w, x)


def packed_gemm_raw(w: PackedMatrix, x: PackedMatrix) -> np.ndarray:
    """Dispatch to the fastest kernel valid for the scheme pair."""
    if w.scheme is PackScheme.BINARY and x.scheme in (PackScheme.BINARY, PackScheme.BINARY_NONNEG):
        return binary_gemm_raw(w, x)
    return masked_popcount_raw(w, x)


def packed_gemm(w: PackedMatrix, x: PackedMatrix) -> np.ndarray:
    return scale_raw(packed_gemm_raw(w, x), w, x)


def reference_gemm_raw(qw: QuantizedTensor, qx: QuantizedTensor) -> np.ndarray:
    return qw.qvals.astype(np.float64) @ qx.qvals.astype(np.float64).T


def reference_gemm(qw: QuantizedTensor, qx: QuantizedTensor) -> np.ndarray:
    """Plain float GEMM over dequantized values: ``W @ X.T``."""
    return qw.dequant() @ qx.dequant().T


# --- file section format -------------------------------------------------------------

_HEADER = struct.Struct("<BII")


def write_packed(f: BinaryIO, p: PackedMatrix) -> int:
    start = f.tell()
    f.write(_HEADER.pack(int(p.scheme), p.rows, p.cols))
    f.write(p.row_scales.astype("<f4").tobytes())
    for name in _STORED_PLANES[p.scheme]:
        f.write(getattr(p, name).astype("<u8").tobytes())
    return f.tell() - start


def read_packed(f: BinaryIO) -> PackedMatrix:
    scheme, rows, cols = _HEADER.unpack(f.read(_HEADER.size))
    scheme = PackScheme(scheme)
    scales = np.frombuffer(f.read(4 * rows), dtype="<f4").astype(np.float64)
    w = words_for(cols)
    planes = {}
    for name in _STORED_PLANES[scheme]:
        planes[name] = np.frombuffer(f.read(8 * rows * w), dtype="<u8").astype(np.uint64).reshape(rows, w)
    pos = planes["plane_pos"]
    neg = planes.get("plane_neg")
    if neg is None:
        neg = np.zeros_like(pos) if scheme is not PackScheme.BINARY else ~pos & valid_mask(cols)
    return PackedMatrix(rows, cols, scheme, pos, neg, scales, planes.get("plane_two"))


# --- benchmarking ------------------------------------------------------------------------

def _random_levels(rng, shape, kind: QuantKind) -> QuantizedTensor:
    levels = rng.choice(sorted(kind.levels), size=shape).astype(np.int8)
    alpha = rng.uniform(0.5, 1.5, size=(shape[0], 1))
    return QuantizedTensor(levels, alpha, np.zeros_like(alpha), QuantScheme(kind))


def _median_ns(fn, repeats: int) -> float:
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return float(np.median(times))


def bench(op: str, shapes, repeats: int = 5, seed: int = 0) -> list[dict]:
    """Time packed vs float-reference GEMM for each ``(M, K, N)`` shape.

    Returns one row per shape with median nanoseconds and effective GOPS.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if op not in ("binary", "ternary"):
        raise ValueError(f"unknown op {op!r}")
    kind = QuantKind.BINARY_WEIGHT if op == "binary" else QuantKind.TERNARY_WEIGHT
    rng = np.random.default_rng(seed)
    rows = []
    for m, k, n in shapes:
        qw = _random_levels(rng, (m, k), kind)
        qx = _random_levels(rng, (n, k), kind)
        pw, px = pack(qw), pack(qx)
        gemm = binary_gemm if op == "binary" else ternary_gemm
        packed_ns = _median_ns(lambda: gemm(pw, px), repeats)
        ref_ns = _median_ns(lambda: reference_gemm(qw, qx), repeats)
        ops = 2.0 * m * k * n
        rows.append({
            "op": op, "m": m, "k": k, "n": n,
            "packed_ns": packed_ns, "reference_ns": ref_ns,
            "packed_gops": ops / packed_ns, "reference_gops": ops / ref_ns,
            "speedup": ref_ns / packed_ns,
        })
    return rows
