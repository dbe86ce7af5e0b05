"""Ternary / binary quantizers for weights and activations.

Every function here works on plain numpy arrays. Weight quantizers treat the
last axis as a row and compute one (alpha, mu) pair per row; activation
quantizers use a single (learned) alpha per tensor.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

EPS = 1e-8
TWN_THRESHOLD = 0.7


class QuantKind(enum.Enum):
    TERNARY_WEIGHT = "ternary_weight"
    BINARY_WEIGHT = "binary_weight"
    TERNARY_ACT_NONNEG = "ternary_act_nonneg"
    TERNARY_ACT_SIGNED = "ternary_act_signed"
    BINARY_ACT_NONNEG = "binary_act_nonneg"
    BINARY_ACT_SIGNED = "binary_act_signed"
    BASELINE_TWN = "baseline_twn"
    BASELINE_BWN = "baseline_bwn"
    INT8_WEIGHT = "int8_weight"
    INT8_ACT_SIGNED = "int8_act_signed"
    INT8_ACT_NONNEG = "int8_act_nonneg"

    @property
    def is_weight(self) -> bool:
        return self in _WEIGHT_KINDS

    @property
    def levels(self) -> frozenset:
        return _LEVELS[self]


_WEIGHT_KINDS = {
    QuantKind.TERNARY_WEIGHT,
    QuantKind.BINARY_WEIGHT,
    QuantKind.BASELINE_TWN,
    QuantKind.BASELINE_BWN,
    QuantKind.INT8_WEIGHT,
}

_LEVELS = {
    QuantKind.TERNARY_WEIGHT: frozenset({-1, 0, 1}),
    QuantKind.TERNARY_ACT_SIGNED: frozenset({-1, 0, 1}),
    QuantKind.BASELINE_TWN: frozenset({-1, 0, 1}),
    QuantKind.TERNARY_ACT_NONNEG: frozenset({0, 1, 2}),
    QuantKind.BINARY_WEIGHT: frozenset({-1, 1}),
    QuantKind.BINARY_ACT_SIGNED: frozenset({-1, 1}),
    QuantKind.BASELINE_BWN: frozenset({-1, 1}),
    QuantKind.BINARY_ACT_NONNEG: frozenset({0, 1}),
    QuantKind.INT8_WEIGHT: frozenset(range(-127, 128)),
    QuantKind.INT8_ACT_SIGNED: frozenset(range(-127, 128)),
    QuantKind.INT8_ACT_NONNEG: frozenset(range(0, 256)),
}


# baseline quantizers are also applied per tensor to activations
_BASELINE_KINDS = (QuantKind.BASELINE_TWN, QuantKind.BASELINE_BWN)


class Granularity(enum.Enum):
    PER_ROW = "per_row"
    PER_TENSOR = "per_tensor"


@dataclass(frozen=True)
class QuantScheme:
    kind: QuantKind
    granularity: Granularity | None = None

    def __post_init__(self):
        expected = Granularity.PER_ROW if self.kind.is_weight else Granularity.PER_TENSOR
        if self.granularity is None:
            object.__setattr__(self, "granularity", expected)
        elif self.granularity is not expected and self.kind not in _BASELINE_KINDS:
            raise ValueError(f"{self.kind.value} requires {expected.value} granularity")

    @property
    def nonneg(self) -> bool:
        return self.kind in (QuantKind.TERNARY_ACT_NONNEG, QuantKind.BINARY_ACT_NONNEG,
                             QuantKind.INT8_ACT_NONNEG)

    @property
    def ternary(self) -> bool:
        return len(self.kind.levels) == 3


@dataclass
class QuantizedTensor:
    """Integer levels with their scale.

    ``alpha`` and ``mu`` broadcast against ``qvals``: shape ``(..., 1)`` for
    per-row quantization, a 0-d array for per-tensor.
    """

    qvals: np.ndarray
    alpha: np.ndarray
    mu: np.ndarray
    scheme: QuantScheme

    @property
    def shape(self) -> tuple:
        return self.qvals.shape

    def dequant(self) -> np.ndarray:
        return self.alpha * self.qvals


@dataclass
class ActQuantState:
    alpha: float = 1.0
    initialized: bool = False
    scheme: QuantScheme = field(default_factory=lambda: QuantScheme(QuantKind.TERNARY_ACT_SIGNED))


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def round_clip(z: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """round_half_away(clip(z, lo, hi)) for small integer ranges, via thresholds.

    Comparing against the half-way points avoids the ``x + 0.5`` rounding
    error of the floor formulation.
    """
    out = np.zeros(z.shape, dtype=np.int8)
    for k in range(1, hi + 1):
        out += z >= k - 0.5
    for k in range(1, -lo + 1):
        out -= z <= -(k - 0.5)
    if lo > 0:
        out = np.maximum(out, lo)
    return out


def _rows(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 0 or w.shape[-1] == 0:
        raise ValueError("quantizer needs a nonempty row")
    return w


def _constant_rows(w: np.ndarray) -> np.ndarray:
    return (w.max(axis=-1, keepdims=True) == w.min(axis=-1, keepdims=True))


# --- baseline weight quantizers -------------------------------------------

def twn_ternarize(w) -> QuantizedTensor:
    w = _rows(w)
    a = np.abs(w)
    delta = TWN_THRESHOLD * a.mean(axis=-1, keepdims=True)
    big = a > delta
    count = big.sum(axis=-1, keepdims=True)
    total = np.where(big, a, 0.0).sum(axis=-1, keepdims=True)
    alpha = np.where(count > 0, total / np.maximum(count, 1), EPS)
    alpha = np.maximum(alpha, EPS)
    levels = np.where(w > delta, 1, np.where(w < -delta, -1, 0)).astype(np.int8)
    return QuantizedTensor(levels, alpha, np.zeros_like(alpha), QuantScheme(QuantKind.BASELINE_TWN))


def bwn_binarize(w) -> QuantizedTensor:
    w = _rows(w)
    alpha = np.maximum(np.abs(w).mean(axis=-1, keepdims=True), EPS)
    levels = np.where(w >= 0, 1, -1).astype(np.int8)
    return QuantizedTensor(levels, alpha, np.zeros_like(alpha), QuantScheme(QuantKind.BASELINE_BWN))


def baseline_act_stats(x, ternary: bool) -> tuple[float, float]:
    """Frozen (threshold, scale) for baseline activations, from one calibration batch."""
    flat = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if ternary:
        q = twn_ternarize(flat)
        return TWN_THRESHOLD * float(np.abs(flat).mean()), float(q.alpha[0, 0])
    return 0.0, float(bwn_binarize(flat).alpha[0, 0])


def baseline_act_quantize(x, delta: float, alpha: float, ternary: bool) -> QuantizedTensor:
    x = np.asarray(x, dtype=np.float64)
    if ternary:
        levels = np.where(x > delta, 1, np.where(x < -delta, -1, 0)).astype(np.int8)
        kind = QuantKind.BASELINE_TWN
    else:
        levels = np.where(x >= 0, 1, -1).astype(np.int8)
        kind = QuantKind.BASELINE_BWN
    return QuantizedTensor(levels, np.asarray(alpha), np.zeros(()), QuantScheme(kind, Granularity.PER_TENSOR))


# --- max-entropy isometric weight quantizers --------------------------------

def tbt_weight_ternarize(w) -> QuantizedTensor:
    w = _rows(w)
    mu = w.mean(axis=-1, keepdims=True)
    alpha = np.maximum(4.0 / 3.0 * np.abs(w - mu).mean(axis=-1, keepdims=True), EPS)
    levels = round_clip((w - mu) / alpha, -1, 1)
    levels = np.where(_constant_rows(w), 0, levels).astype(np.int8)
    return QuantizedTensor(levels, alpha, mu, QuantScheme(QuantKind.TERNARY_WEIGHT))


def tbt_weight_binarize(w) -> QuantizedTensor:
    w = _rows(w)
    mu = w.mean(axis=-1, keepdims=True)
    alpha = np.maximum(np.abs(w - mu).mean(axis=-1, keepdims=True), EPS)
    levels = np.where(w - mu >= 0, 1, -1)
    levels = np.where(_constant_rows(w), 1, levels).astype(np.int8)
    return QuantizedTensor(levels, alpha, mu, QuantScheme(QuantKind.BINARY_WEIGHT))


def tbt_weight_backward(w, upstream, q: QuantizedTensor) -> np.ndarray:
    """Straight-through gradient of the weight quantizer.

    alpha and mu are constants here. Binary passes gradient where the
    normalized weight lies strictly inside (-1, 1), ternary on the closed
    clip range.
    """
    w = np.asarray(w, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if w.shape != upstream.shape or w.shape != q.shape:
        raise ValueError(f"shape mismatch: {w.shape}, {upstream.shape}, {q.shape}")
    z = np.abs((w - q.mu) / q.alpha)
    inside = z < 1.0 if q.scheme.kind is QuantKind.BINARY_WEIGHT else z <= 1.0
    return upstream * inside


def int8_weight_quantize(w) -> QuantizedTensor:
    w = _rows(w)
    alpha = np.maximum(np.abs(w).max(axis=-1, keepdims=True) / 127.0, EPS)
    levels = round_half_away(np.clip(w / alpha, -127.0, 127.0)).astype(np.int16)
    return QuantizedTensor(levels, alpha, np.zeros_like(alpha), QuantScheme(QuantKind.INT8_WEIGHT))


def weight_quantizer(kind: QuantKind):
    return {
        QuantKind.INT8_WEIGHT: int8_weight_quantize,
        QuantKind.TERNARY_WEIGHT: tbt_weight_ternarize,
        QuantKind.BINARY_WEIGHT: tbt_weight_binarize,
        QuantKind.BASELINE_TWN: twn_ternarize,
        QuantKind.BASELINE_BWN: bwn_binarize,
    }[kind]


# --- elastic activation quantizers -----------------------------------------

def _centered(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # mean over the feature (last) axis; keeps tokens independent of each other
    mu = x.mean(axis=-1, keepdims=True)
    return x - mu, mu


def _check_nonneg(x: np.ndarray):
    if np.any(x < 0):
        raise ValueError("non-negative activation quantizer received negative inputs")


def _alpha(state_or_alpha) -> float:
    alpha = state_or_alpha.alpha if isinstance(state_or_alpha, ActQuantState) else state_or_alpha
    return max(float(alpha), EPS)


def elastic_act_ternarize(x, state: ActQuantState) -> QuantizedTensor:
    x = np.asarray(x, dtype=np.float64)
    alpha = _alpha(state)
    if state.scheme.nonneg:
        _check_nonneg(x)
        levels = round_clip(x / alpha, 0, 2)
        mu = np.zeros(())
        kind = QuantKind.TERNARY_ACT_NONNEG
    else:
        xc, mu = _centered(x)
        levels = round_clip(xc / alpha, -1, 1)
        kind = QuantKind.TERNARY_ACT_SIGNED
    return QuantizedTensor(levels.astype(np.int8), np.asarray(alpha), mu, QuantScheme(kind))


def elastic_act_binarize(x, state: ActQuantState) -> QuantizedTensor:
    x = np.asarray(x, dtype=np.float64)
    alpha = _alpha(state)
    if state.scheme.nonneg:
        _check_nonneg(x)
        levels = round_clip(x / alpha, 0, 1)
        mu = np.zeros(())
        kind = QuantKind.BINARY_ACT_NONNEG
    else:
        xc, mu = _centered(x)
        levels = np.where(xc >= 0, 1, -1)
        kind = QuantKind.BINARY_ACT_SIGNED
    return QuantizedTensor(levels.astype(np.int8), np.asarray(alpha), mu, QuantScheme(kind))


def _int8_range(state: ActQuantState) -> tuple[float, float]:
    return (0.0, 255.0) if state.scheme.nonneg else (-127.0, 127.0)


def int8_act_quantize(x, state: ActQuantState) -> QuantizedTensor:
    """Uniform 8-bit fake-quant with a learned per-tensor scale (no centering)."""
    x = np.asarray(x, dtype=np.float64)
    alpha = _alpha(state)
    if state.scheme.nonneg:
        _check_nonneg(x)
    lo, hi = _int8_range(state)
    levels = round_half_away(np.clip(x / alpha, lo, hi)).astype(np.int16)
    return QuantizedTensor(levels, np.asarray(alpha), np.zeros(()), state.scheme)


def _is_int8(state: ActQuantState) -> bool:
    return state.scheme.kind in (QuantKind.INT8_ACT_SIGNED, QuantKind.INT8_ACT_NONNEG)


def elastic_quantize(x, state: ActQuantState) -> QuantizedTensor:
    if _is_int8(state):
        return int8_act_quantize(x, state)
    if state.scheme.ternary:
        return elastic_act_ternarize(x, state)
    return elastic_act_binarize(x, state)


def _upper(state: ActQuantState) -> float:
    return 2.0 if state.scheme.ternary and state.scheme.nonneg else 1.0


def _check_shapes(x, upstream):
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape != upstream.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {upstream.shape}")
    return x, upstream


def act_ste_terms(x, state: ActQuantState, q: QuantizedTensor | None = None):
    """Input-gradient mask and per-element alpha partials for one forward.

    Pass the forward's ``q`` to reuse its levels and per-token means.
    """
    x = np.asarray(x, dtype=np.float64)
    alpha = _alpha(state)
    if q is None:
        q = elastic_quantize(x, state)
    if _is_int8(state):
        lo, hi = _int8_range(state)
        z = x / alpha
        inside = (z >= lo) & (z <= hi)
    elif state.scheme.nonneg:
        z = x / alpha
        inside = (z >= 0) & (z <= _upper(state))
    else:
        z = (x - q.mu) / alpha
        inside = np.abs(z) <= 1.0
        if state.scheme.kind is QuantKind.BINARY_ACT_SIGNED:
            return inside, np.where(z >= 0, 1.0, -1.0)
    return inside, q.qvals - z * inside


def act_alpha_partials(x, state: ActQuantState) -> np.ndarray:
    """Per-element STE derivative of the dequantized activation w.r.t. alpha."""
    return act_ste_terms(x, state)[1]


def elastic_act_grad_alpha(x, state: ActQuantState, upstream) -> float:
    x, upstream = _check_shapes(x, upstream)
    return float(np.sum(upstream * act_alpha_partials(x, state)))


def elastic_act_binarize_grad_alpha(x, state: ActQuantState, upstream) -> float:
    x, upstream = _check_shapes(x, upstream)
    return float(np.sum(upstream * act_alpha_partials(x, state)))


def act_grad_input(x, state: ActQuantState, upstream) -> np.ndarray:
    x, upstream = _check_shapes(x, upstream)
    return upstream * act_ste_terms(x, state)[0]


def calibrate_alpha(x, scheme: QuantScheme) -> float:
    """Initial activation scale from the statistics of a first batch."""
    x = np.asarray(x, dtype=np.float64)
    if scheme.kind in (QuantKind.INT8_ACT_SIGNED, QuantKind.INT8_ACT_NONNEG):
        return max(float(np.abs(x).max(initial=0.0)) / (255.0 if scheme.nonneg else 127.0), EPS)
    dev = np.abs(x) if scheme.nonneg else np.abs(_centered(x)[0])
    scale = 4.0 / 3.0 if scheme.ternary else 1.0
    return max(scale * float(dev.mean()), EPS)


# --- entropy ----------------------------------------------------------------

def level_proportions(q: QuantizedTensor) -> dict[int, float]:
    vals, counts = np.unique(q.qvals, return_counts=True)
    n = q.qvals.size
    props = {int(lvl): 0.0 for lvl in q.scheme.kind.levels}
    for v, c in zip(vals, counts):
        props[int(v)] = float(c / n)
    return props


def entropy_of(proportions) -> float:
    """Shannon entropy in nats; accepts a sequence or a level -> proportion mapping."""
    if isinstance(proportions, dict):
        proportions = proportions.values()
    p = np.asarray([v for v in proportions if v > 0], dtype=np.float64)
    return float(-(p * np.log(p)).sum())


def quant_entropy(q: QuantizedTensor) -> float:
    """Entropy in nats of the level occupancy of ``q``."""
    return entropy_of(level_proportions(q).values())
