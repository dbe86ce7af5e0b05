"""Quantization-aware transformer encoder-decoder built on :mod:`tbtkit.tensorgrad`."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import kernels
from . import tensorgrad as tg
from .quantcore import (
    EPS,
    ActQuantState,
    QuantizedTensor,
    QuantKind,
    QuantScheme,
    act_ste_terms,
    baseline_act_quantize,
    baseline_act_stats,
    calibrate_alpha,
    elastic_quantize,
    tbt_weight_backward,
    weight_quantizer,
)
from .tensorgrad import Parameter, Tensor

PAD, BOS, EOS = 0, 1, 2
VALID_BITS = (1, 2, 8, 32)


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ffn: int = 128
    max_seq_len: int = 33
    bits_embed: int = 32
    bits_weight: int = 32
    bits_act: int = 32
    dropout: float = 0.0
    # "tbt" = max-entropy isometric weights, "baseline" = TWN/BWN
    weight_method: str = "tbt"
    # "elastic" = learned-scale activations, "baseline" = TWN/BWN statistics
    act_method: str = "elastic"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ffn", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        for name in ("bits_embed", "bits_weight", "bits_act"):
            if getattr(self, name) not in VALID_BITS:
                raise ValueError(f"{name} must be one of {VALID_BITS}, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.weight_method not in ("tbt", "baseline"):
            raise ValueError(f"unknown weight_method {self.weight_method!r}")
        if self.act_method not in ("elastic", "baseline"):
            raise ValueError(f"unknown act_method {self.act_method!r}")

    @property
    def bits(self) -> str:
        return f"{self.bits_embed}-{self.bits_weight}-{self.bits_act}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in names:
                raise ValueError(f"unknown model key {k!r}")
            kwargs[k] = v
        return cls(**kwargs)


def weight_kind(bits: int, method: str) -> QuantKind | None:
    if bits == 32:
        return None
    if bits == 8:
        return QuantKind.INT8_WEIGHT
    if method == "baseline":
        return QuantKind.BASELINE_TWN if bits == 2 else QuantKind.BASELINE_BWN
    return QuantKind.TERNARY_WEIGHT if bits == 2 else QuantKind.BINARY_WEIGHT


def act_kind(bits: int, nonneg: bool) -> QuantKind | None:
    if bits == 32:
        return None
    table = {
        (8, False): QuantKind.INT8_ACT_SIGNED, (8, True): QuantKind.INT8_ACT_NONNEG,
        (2, False): QuantKind.TERNARY_ACT_SIGNED, (2, True): QuantKind.TERNARY_ACT_NONNEG,
        (1, False): QuantKind.BINARY_ACT_SIGNED, (1, True): QuantKind.BINARY_ACT_NONNEG,
    }
    return table[(bits, nonneg)]


# --- fake-quant nodes ------------------------------------------------------------------

def quantize_weight(w: np.ndarray, kind: QuantKind) -> tuple[QuantizedTensor, np.ndarray | None]:
    """Quantize a weight matrix row-wise; also return its STE mask.

    Row scales are rounded to float32, the precision they are stored at in
    packed exports, so training and packed inference share the same values.
    """
    q = weight_quantizer(kind)(w)
    mask = None
    if kind in (QuantKind.TERNARY_WEIGHT, QuantKind.BINARY_WEIGHT):
        mask = tbt_weight_backward(w, np.ones_like(w), q)
    q.alpha = q.alpha.astype(np.float32).astype(np.float64)
    return q, mask


def fake_quant_weight(w: Tensor, kind: QuantKind) -> tuple[Tensor, QuantizedTensor]:
    q, mask = quantize_weight(w.data, kind)
    deq = q.dequant()
    op = tg.custom_grad(lambda _: (deq, None), lambda _, g: g if mask is None else g * mask)
    return op(w), q


def level_linear(x: Tensor, w: Tensor, qx: QuantizedTensor, qw: QuantizedTensor) -> Tensor:
    """``x @ w.T`` evaluated on integer levels, then scaled.

    Forward is ``(levels_x @ levels_w.T * alpha_x) * alpha_w``; the packed
    kernels reproduce it bit for bit. Backward is the plain matmul rule on the
    dequantized operands.
    """
    ax, aw = _x_scale(qx), qw.alpha.reshape(-1)

    def forward(xd, wd):
        # integer sums stay below 2**24, so float32 products are exact
        raw = (qx.qvals.astype(np.float32) @ qw.qvals.astype(np.float32).T).astype(np.float64)
        return (raw * ax) * aw, (xd, wd)

    def backward(ctx, g):
        xd, wd = ctx
        gx = g @ wd
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        return gx, gw

    return tg.custom_grad(forward, backward)(x, w)


def _x_scale(qx: QuantizedTensor) -> np.ndarray:
    a = np.asarray(qx.alpha, dtype=np.float64)
    return a if a.ndim else a.reshape(())


# --- modules -------------------------------------------------------------------------

class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix.rstrip("."), self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True):
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)


class ActQuant(Module):
    """Activation quantizer: elastic (learned alpha), baseline statistics, or identity."""

    def __init__(self, bits: int, method: str, nonneg: bool):
        self.bits = bits
        self.method = method
        self.nonneg = nonneg
        kind = act_kind(bits, nonneg)
        self.baseline = method == "baseline" and bits in (1, 2)
        self.scheme = QuantScheme(kind) if kind is not None and not self.baseline else None
        self.alpha = Parameter(1.0, min_value=EPS) if self.scheme is not None else None
        # frozen (threshold, scale) of the baseline quantizer
        self.fixed = np.zeros(2) if self.baseline else None
        self.initialized = self.scheme is None and not self.baseline

    @property
    def state(self) -> ActQuantState:
        return ActQuantState(float(self.alpha.data), self.initialized, self.scheme)

    def __call__(self, x: Tensor) -> tuple[Tensor, QuantizedTensor | None]:
        if self.bits == 32:
            return x, None
        if self.baseline:
            ternary = self.bits == 2
            if not self.initialized:
                self.fixed = np.array(baseline_act_stats(x.data, ternary))
                self.initialized = True
            q = baseline_act_quantize(x.data, self.fixed[0], self.fixed[1], ternary)
            deq = q.dequant()
            return tg.custom_grad(lambda _: (deq, None), lambda _, g: g)(x), q
        if not self.initialized:
            self.alpha.data = np.asarray(calibrate_alpha(x.data, self.scheme))
            self.initialized = True
        state = self.state
        q = elastic_quantize(x.data, state)

        def backward(_, g):
            inside, partials = act_ste_terms(x.data, state, q)
            return g * inside, np.asarray(np.sum(g * partials))

        return tg.custom_grad(lambda *_: (q.dequant(), None), backward)(x, self.alpha), q


class QuantLinear(Module):
    def __init__(self, d_in: int, d_out: int, cfg: ModelConfig, rng: np.random.Generator,
                 nonneg_input: bool = False):
        bound = math.sqrt(6.0 / (d_in + d_out))
        self.weight = Parameter(rng.uniform(-bound, bound, size=(d_out, d_in)))
        self.bias = Parameter(np.zeros(d_out))
        self.kind = weight_kind(cfg.bits_weight, cfg.weight_method)
        self.act = ActQuant(cfg.bits_act, cfg.act_method, nonneg_input)
        self.packed: kernels.PackedMatrix | None = None
        self._cache = None

    def quantized_weight(self) -> tuple[Tensor, QuantizedTensor | None]:
        if self.kind is None:
            return self.weight, None
        if tg._grad_enabled:
            return fake_quant_weight(self.weight, self.kind)
        # inference reuses the quantized copy until the master weights change
        if self._cache is None or self._cache[0] is not self.weight.data:
            self._cache = (self.weight.data, *fake_quant_weight(self.weight, self.kind))
        return self._cache[1], self._cache[2]

    def __call__(self, x: Tensor) -> Tensor:
        xd, qx = self.act(x)
        if self.packed is not None and _packable(qx):
            return tg.add(Tensor(packed_linear(self.packed, qx)), self.bias)
        wd, qw = self.quantized_weight()
        if qx is not None and qw is not None:
            y = level_linear(xd, wd, qx, qw)
        else:
            y = tg.matmul(xd, tg.transpose(wd))
        return tg.add(y, self.bias)


def _packable(q: QuantizedTensor | None) -> bool:
    return q is not None and q.scheme.kind in kernels.PACKABLE_KINDS


def packed_linear(packed: kernels.PackedMatrix, qx: QuantizedTensor) -> np.ndarray:
    """Inference-only linear via bit-packed kernels."""
    lead = qx.shape[:-1]
    levels = qx.qvals.reshape(-1, qx.shape[-1])
    alpha = np.broadcast_to(np.asarray(qx.alpha, dtype=np.float64), lead + (1,)).reshape(-1, 1)
    px = kernels.pack(QuantizedTensor(levels, alpha, np.zeros_like(alpha), qx.scheme))
    raw = kernels.packed_gemm_raw(packed, px).T
    y = (raw * px.row_scales[:, None]) * packed.row_scales[None, :]
    return y.reshape(lead + (packed.rows,))


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return tg.layernorm(x, self.gamma, self.beta)


class Attention(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.q_proj = QuantLinear(d, d, cfg, rng)
        self.k_proj = QuantLinear(d, d, cfg, rng)
        self.v_proj = QuantLinear(d, d, cfg, rng)
        self.o_proj = QuantLinear(d, d, cfg, rng)
        self.q_act = ActQuant(cfg.bits_act, cfg.act_method, nonneg=False)
        self.k_act = ActQuant(cfg.bits_act, cfg.act_method, nonneg=False)
        self.v_act = ActQuant(cfg.bits_act, cfg.act_method, nonneg=False)
        self.p_act = ActQuant(cfg.bits_act, cfg.act_method, nonneg=True)

    def _heads(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return tg.transpose(tg.reshape(x, (b, t, self.n_heads, d // self.n_heads)), (0, 2, 1, 3))

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask: np.ndarray | None) -> Tensor:
        b, tq, d = q_in.shape
        tk = kv_in.shape[1]
        if mask is not None and np.broadcast_shapes(mask.shape, (b, self.n_heads, tq, tk)) != (b, self.n_heads, tq, tk):
            raise ValueError(f"mask shape {mask.shape} does not match attention ({b}, {tq}, {tk})")
        q, _ = self.q_act(self.q_proj(q_in))
        k, _ = self.k_act(self.k_proj(kv_in))
        v, _ = self.v_act(self.v_proj(kv_in))
        q, k, v = self._heads(q), self._heads(k), self._heads(v)
        scores = tg.mul(tg.matmul(q, tg.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d // self.n_heads))
        if mask is not None:
            scores = tg.masked_fill(scores, mask, -np.inf)
        probs, _ = self.p_act(tg.softmax(scores, axis=-1))
        ctx = tg.matmul(probs, v)
        ctx = tg.reshape(tg.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
        return self.o_proj(ctx)


class FeedForward(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.fc1 = QuantLinear(cfg.d_model, cfg.d_ffn, cfg, rng)
        self.fc2 = QuantLinear(cfg.d_ffn, cfg.d_model, cfg, rng, nonneg_input=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tg.relu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = Attention(cfg, rng)
        self.ln2 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg, rng)

    def __call__(self, x: Tensor, mask, drop) -> Tensor:
        h = self.ln1(x)
        x = tg.add(x, drop(self.attn(h, h, mask)))
        return tg.add(x, drop(self.ffn(self.ln2(x))))


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(cfg.d_model)
        self.self_attn = Attention(cfg, rng)
        self.ln2 = LayerNorm(cfg.d_model)
        self.cross_attn = Attention(cfg, rng)
        self.ln3 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg, rng)

    def __call__(self, x: Tensor, memory: Tensor, self_mask, cross_mask, drop) -> Tensor:
        h = self.ln1(x)
        x = tg.add(x, drop(self.self_attn(h, h, self_mask)))
        x = tg.add(x, drop(self.cross_attn(self.ln2(x), memory, cross_mask)))
        return tg.add(x, drop(self.ffn(self.ln3(x))))


@dataclass
class ModelOutput:
    logits: Tensor
    enc: Tensor
    dec: Tensor


class Seq2Seq(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.rng = np.random.default_rng(seed + 1)
        d = cfg.d_model
        self.tok = Parameter(rng.normal(0.0, 1.0 / math.sqrt(d), size=(cfg.vocab_size, d)))
        self.pos = Parameter(rng.normal(0.0, 0.1, size=(cfg.max_seq_len, d)))
        self.embed_kind = weight_kind(cfg.bits_embed, cfg.weight_method)
        self.encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.n_enc_layers)]
        self.decoder = [DecoderLayer(cfg, rng) for _ in range(cfg.n_dec_layers)]
        self.enc_ln = LayerNorm(d)
        self.dec_ln = LayerNorm(d)
        self.head_act = ActQuant(cfg.bits_act, cfg.act_method, nonneg=False)
        self.head_packed: kernels.PackedMatrix | None = None
        self._emb_cache = None

    # embeddings -------------------------------------------------------------------
    def embedding_table(self) -> tuple[Tensor, QuantizedTensor | None]:
        if self.embed_kind is None:
            return self.tok, None
        if tg._grad_enabled:
            return fake_quant_weight(self.tok, self.embed_kind)
        if self._emb_cache is None or self._emb_cache[0] is not self.tok.data:
            self._emb_cache = (self.tok.data, *fake_quant_weight(self.tok, self.embed_kind))
        return self._emb_cache[1], self._emb_cache[2]

    def embed(self, ids: np.ndarray, table: Tensor) -> Tensor:
        ids = np.asarray(ids)
        if ids.shape[1] > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {self.cfg.max_seq_len}")
        return tg.add(tg.embedding(ids, table), self.pos[: ids.shape[1]])

    def _dropout(self, x: Tensor) -> Tensor:
        p = self.cfg.dropout
        if not self.training or p == 0.0:
            return x
        keep = (self.rng.random(x.shape) >= p) / (1.0 - p)
        return tg.mul(x, keep)

    # passes -------------------------------------------------------------------------
    def encode(self, src, table: Tensor | None = None) -> tuple[Tensor, np.ndarray]:
        src = np.asarray(src)
        if table is None:
            table, _ = self.embedding_table()
        mask = (src == PAD)[:, None, None, :]
        x = self.embed(src, table)
        for layer in self.encoder:
            x = layer(x, mask, self._dropout)
        return self.enc_ln(x), mask

    def decode(self, memory: Tensor, src_mask: np.ndarray, tgt_in, table: Tensor | None = None) -> Tensor:
        tgt_in = np.asarray(tgt_in)
        if table is None:
            table, _ = self.embedding_table()
        t = tgt_in.shape[1]
        causal = np.triu(np.ones((t, t), dtype=bool), 1)[None, None]
        self_mask = causal | (tgt_in == PAD)[:, None, None, :]
        x = self.embed(tgt_in, table)
        for layer in self.decoder:
            x = layer(x, memory, self_mask, src_mask, self._dropout)
        return self.dec_ln(x)

    def project(self, h: Tensor) -> Tensor:
        table, qt = self.embedding_table()
        hd, qh = self.head_act(h)
        if self.head_packed is not None and _packable(qh):
            return Tensor(packed_linear(self.head_packed, qh))
        if qh is not None and qt is not None:
            return level_linear(hd, table, qh, qt)
        return tg.matmul(hd, tg.transpose(table))

    def __call__(self, src, tgt_in) -> ModelOutput:
        table, _ = self.embedding_table()
        memory, src_mask = self.encode(src, table)
        dec = self.decode(memory, src_mask, tgt_in, table)
        return ModelOutput(self.project(dec), memory, dec)

    # bookkeeping ------------------------------------------------------------------
    def act_quantizers(self) -> list[tuple[str, ActQuant]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, ActQuant)]

    def quantized_matrices(self) -> list[tuple[str, Parameter, QuantKind]]:
        """Every weight matrix that is quantized under this config, LM head/embedding first."""
        out = []
        if self.embed_kind is not None:
            out.append(("tok", self.tok, self.embed_kind))
        for name, m in self.named_modules():
            if isinstance(m, QuantLinear) and m.kind is not None:
                out.append((f"{name}.weight", m.weight, m.kind))
        return out

    def attach_packed(self, matrices: dict[str, kernels.PackedMatrix]):
        """Serve the named quantized matrices from packed bit planes.

        The master weights are replaced by the packed dequantized values and
        pinned in the inference caches, so the model cannot be trained after
        this call.
        """
        wanted = {name: (p, kind) for name, p, kind in self.quantized_matrices()}
        if set(matrices) != set(wanted):
            raise ValueError(f"packed matrices {sorted(matrices)} do not match model {sorted(wanted)}")
        layers = dict(self.linear_layers())
        for name, packed in matrices.items():
            param, kind = wanted[name]
            if (packed.rows, packed.cols) != param.shape:
                raise ValueError(f"shape mismatch for {name}")
            q = kernels.unpack(packed)
            q.scheme = QuantScheme(kind)
            param.data = q.dequant()
            pinned = (param.data, Tensor(param.data), q)
            if name == "tok":
                self.head_packed, self._emb_cache = packed, pinned
            else:
                layer = layers[name.rsplit(".", 1)[0]]
                layer.packed, layer._cache = packed, pinned

    def linear_layers(self) -> list[tuple[str, QuantLinear]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, QuantLinear)]

    def load_parameters(self, other: Seq2Seq, include_alphas: bool = True):
        mine = dict(self.named_parameters())
        for name, p in other.named_parameters():
            if name in mine and (include_alphas or not name.endswith("act.alpha")):
                if mine[name].shape != p.shape:
                    raise ValueError(f"shape mismatch for {name}: {mine[name].shape} vs {p.shape}")
                mine[name].data = p.data.copy()


# --- distillation -------------------------------------------------------------------------

@dataclass
class DistillConfig:
    lambda_kd: float = 1.0
    lambda_h: float = 1.0
    temperature: float = 2.0


def _masked_mse(a: Tensor, b: np.ndarray, valid: np.ndarray) -> Tensor:
    diff = tg.sub(a, b)
    sq = tg.mul(tg.square(diff), valid[..., None].astype(np.float64))
    return tg.mul(tg.tsum(sq), 1.0 / (max(int(valid.sum()), 1) * a.shape[-1]))


def distill_loss(student: ModelOutput, teacher: ModelOutput, labels, src=None,
                 cfg: DistillConfig | None = None) -> tuple[Tensor, dict]:
    """Cross-entropy plus temperature-scaled KL to the teacher plus hidden-state MSE."""
    cfg = cfg or DistillConfig()
    labels = np.asarray(labels)
    if student.logits.shape != teacher.logits.shape:
        raise ValueError(f"student/teacher logits differ: {student.logits.shape} vs {teacher.logits.shape}")
    if student.enc.shape != teacher.enc.shape or student.dec.shape != teacher.dec.shape:
        raise ValueError("student/teacher hidden states differ in shape")
    ce = tg.cross_entropy(student.logits, labels, ignore_index=PAD)
    parts = {"ce": ce.item(), "kd": 0.0, "hidden": 0.0}
    total = ce
    valid = labels != PAD
    count = max(int(valid.sum()), 1)
    if cfg.lambda_kd:
        t = cfg.temperature
        z = teacher.logits.data / t
        z = z - z.max(axis=-1, keepdims=True)
        p_t = np.exp(z)
        p_t /= p_t.sum(axis=-1, keepdims=True)
        log_p_t = np.log(np.maximum(p_t, 1e-300))
        weights = p_t * valid[..., None]
        log_q = tg.log_softmax(tg.mul(student.logits, 1.0 / t), axis=-1)
        cross = tg.mul(tg.tsum(tg.mul(log_q, weights)), -1.0 / count)
        kl = tg.add(cross, float((weights * log_p_t).sum() / count))
        parts["kd"] = kl.item()
        total = tg.add(total, tg.mul(kl, cfg.lambda_kd * t * t))
    if cfg.lambda_h:
        src_valid = np.asarray(src) != PAD if src is not None else np.ones(student.enc.shape[:2], bool)
        mse = tg.mul(tg.add(_masked_mse(student.enc, teacher.enc.data, src_valid),
                            _masked_mse(student.dec, teacher.dec.data, valid)), 0.5)
        parts["hidden"] = mse.item()
        total = tg.add(total, tg.mul(mse, cfg.lambda_h))
    return total, parts


# --- decoding -------------------------------------------------------------------------------

def greedy_decode(model: Seq2Seq, src_ids, max_len: int, eos_id: int = EOS, bos_id: int = BOS) -> list[list[int]]:
    """Batched argmax decoding. Returned sequences exclude BOS and the final EOS."""
    src = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
    if max_len > model.cfg.max_seq_len:
        raise ValueError("max_len exceeds the decoder's positional range")
    was_training = model.training
    model.eval()
    try:
        with tg.no_grad():
            table, _ = model.embedding_table()
            memory, src_mask = model.encode(src, table)
            b = src.shape[0]
            out = np.full((b, 1), bos_id, dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            lengths = np.full(b, max_len)
            for step in range(max_len):
                h = model.decode(memory, src_mask, out, table)
                logits = model.project(h[:, -1:, :]).data[:, 0, :]
                nxt = logits.argmax(axis=-1)
                newly = (nxt == eos_id) & ~done
                lengths[newly] = step
                done |= newly
                out = np.concatenate([out, np.where(done, eos_id, nxt)[:, None]], axis=1)
                if done.all():
                    break
    finally:
        model.train(was_training)
    return [out[i, 1: 1 + lengths[i]].tolist() for i in range(b)]


def init_student_from_teacher(teacher: Seq2Seq, config: ModelConfig, seed: int = 0) -> Seq2Seq:
    student = Seq2Seq(config, seed=seed)
    student.load_parameters(teacher, include_alphas=False)
    return student
