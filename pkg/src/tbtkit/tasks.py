"""Synthetic sequence-to-sequence tasks and evaluation metrics."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import BOS, EOS, PAD, Seq2Seq, greedy_decode
from .quantcore import quant_entropy

FIRST_TOKEN = 3  # ids below this are PAD/BOS/EOS


class TaskKind(str, enum.Enum):
    COPY = "copy"
    REVERSE = "reverse"
    SORT_DIGITS = "sort_digits"


@dataclass
class TaskSpec:
    kind: TaskKind = TaskKind.COPY
    vocab_size: int = 64
    min_len: int = 4
    max_len: int = 16
    seed: int = 0

    def __post_init__(self):
        self.kind = TaskKind(self.kind)
        if self.vocab_size <= FIRST_TOKEN:
            raise ValueError("vocab_size must leave room for content tokens after PAD/BOS/EOS")
        if not 0 < self.min_len <= self.max_len:
            raise ValueError("need 0 < min_len <= max_len")

    def check_fits(self, max_seq_len: int):
        if self.max_len >= max_seq_len - 2:
            raise ValueError(f"max_len {self.max_len} leaves no room for BOS/EOS in {max_seq_len} positions")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


Pair = tuple[list[int], list[int]]


def target_for(kind: TaskKind, src: list[int]) -> list[int]:
    if kind is TaskKind.COPY:
        return list(src)
    if kind is TaskKind.REVERSE:
        return src[::-1]
    return sorted(src)


def generate(spec: TaskSpec, n: int) -> list[Pair]:
    rng = np.random.default_rng(spec.seed)
    lengths = rng.integers(spec.min_len, spec.max_len + 1, size=n)
    pairs = []
    for length in lengths:
        src = rng.integers(FIRST_TOKEN, spec.vocab_size, size=int(length)).tolist()
        pairs.append((src, target_for(spec.kind, src)))
    return pairs


def make_batch(pairs: list[Pair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad a list of pairs into (src, decoder input, labels).

    The source ends with EOS; the decoder input starts with BOS and the labels
    end with EOS.
    """
    b = len(pairs)
    s = max(len(src) for src, _ in pairs) + 1
    t = max(len(tgt) for _, tgt in pairs) + 1
    src = np.full((b, s), PAD, dtype=np.int64)
    tgt_in = np.full((b, t), PAD, dtype=np.int64)
    labels = np.full((b, t), PAD, dtype=np.int64)
    for i, (x, y) in enumerate(pairs):
        src[i, : len(x) + 1] = x + [EOS]
        tgt_in[i, : len(y) + 1] = [BOS] + y
        labels[i, : len(y) + 1] = y + [EOS]
    return src, tgt_in, labels


def source_batch(srcs: list[list[int]]) -> np.ndarray:
    s = max(len(x) for x in srcs) + 1
    out = np.full((len(srcs), s), PAD, dtype=np.int64)
    for i, x in enumerate(srcs):
        out[i, : len(x) + 1] = x + [EOS]
    return out


@dataclass
class EvalReport:
    token_accuracy: float
    sequence_accuracy: float
    avg_gen_length: float
    avg_ref_length: float
    n: int = 0
    capped_fraction: float = 0.0
    layer_entropy: list[float] = field(default_factory=list)

    def __post_init__(self):
        for name in ("token_accuracy", "sequence_accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} out of range: {v}")

    def to_row(self) -> dict:
        row = {k: v for k, v in asdict(self).items() if k != "layer_entropy"}
        row["layer_entropy"] = ";".join(f"{e:.6f}" for e in self.layer_entropy)
        return row


def score(predictions: list[list[int]], references: list[list[int]], cap: int | None = None) -> EvalReport:
    """Metrics over already decoded outputs.

    Token accuracy compares position by position from the left and divides by
    the reference length.
    """
    if len(predictions) != len(references):
        raise ValueError("prediction/reference count mismatch")
    n = len(references)
    if n == 0:
        raise ValueError("empty dataset")
    matched = total = exact = 0
    gen_len = ref_len = capped = 0
    for pred, ref in zip(predictions, references):
        matched += sum(p == r for p, r in zip(pred, ref))
        total += len(ref)
        exact += pred == ref
        gen_len += len(pred)
        ref_len += len(ref)
        capped += cap is not None and len(pred) >= cap
    return EvalReport(
        token_accuracy=matched / max(total, 1),
        sequence_accuracy=exact / n,
        avg_gen_length=gen_len / n,
        avg_ref_length=ref_len / n,
        n=n,
        capped_fraction=capped / n,
    )


def layer_entropies(model: Seq2Seq) -> list[float]:
    from .model import quantize_weight

    return [quant_entropy(quantize_weight(p.data, kind)[0]) for _, p, kind in model.quantized_matrices()]


def decode_limit(model: Seq2Seq, dataset: list[Pair]) -> int:
    longest = max(len(tgt) for _, tgt in dataset)
    return min(model.cfg.max_seq_len, 2 * longest + 2)


def evaluate(model: Seq2Seq, dataset: list[Pair], batch_size: int = 128, max_len: int | None = None) -> EvalReport:
    max_len = max_len or decode_limit(model, dataset)
    preds = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start: start + batch_size]
        preds.extend(greedy_decode(model, source_batch([s for s, _ in chunk]), max_len))
    report = score(preds, [t for _, t in dataset], cap=max_len)
    report.layer_entropy = layer_entropies(model)
    return report


def dump_dataset(pairs: list[Pair], path) -> None:
    with open(path, "w") as f:
        for src, tgt in pairs:
            f.write(" ".join(map(str, src)) + "\t" + " ".join(map(str, tgt)) + "\n")


def load_dataset(path) -> list[Pair]:
    pairs = []
    for line in Path(path).read_text().splitlines():
        src, tgt = line.split("\t")
        pairs.append(([int(t) for t in src.split()], [int(t) for t in tgt.split()]))
    return pairs
