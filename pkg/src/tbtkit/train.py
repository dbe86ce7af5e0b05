"""Teacher training and quantized-student distillation loops."""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import tensorgrad as tg
from .model import PAD, VALID_BITS, DistillConfig, ModelConfig, Seq2Seq, distill_loss, init_student_from_teacher
from .tasks import EvalReport, TaskSpec, evaluate, generate, make_batch

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 100_003


class Ablation(str, enum.Enum):
    BOTH = "both"
    WEIGHT_ONLY = "weight_only"
    ACT_ONLY = "act_only"
    BASELINE = "baseline"

    @property
    def methods(self) -> tuple[str, str]:
        return {
            Ablation.BOTH: ("tbt", "elastic"),
            Ablation.WEIGHT_ONLY: ("tbt", "baseline"),
            Ablation.ACT_ONLY: ("baseline", "elastic"),
            Ablation.BASELINE: ("baseline", "baseline"),
        }[self]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    epochs: int = 30
    batch_size: int = 64
    lr: float = 3e-4
    warmup_steps: int = 100
    kd: DistillConfig = field(default_factory=DistillConfig)
    ablation: Ablation = Ablation.BOTH
    seed: int = 0
    output_dir: str = "runs"
    train_size: int = 20000
    eval_size: int = 512

    def __post_init__(self):
        self.ablation = Ablation(self.ablation)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.train_size < 1 or self.eval_size < 1:
            raise ValueError("train_size and eval_size must be >= 1")
        self.task.check_fits(self.model.max_seq_len)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(model=self.model.to_dict(), task=self.task.to_dict(), kd=asdict(self.kd),
                 ablation=self.ablation.value)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        model = ModelConfig.from_dict(d.pop("model", {}))
        task = TaskSpec(**d.pop("task", {}))
        kd = DistillConfig(**d.pop("kd", {}))
        return cls(model=model, task=task, kd=kd, **d)

    def flat(self) -> dict[str, object]:
        out = {}
        for k, v in self.to_dict().items():
            if isinstance(v, dict):
                out.update({f"{k}.{kk}": vv for kk, vv in v.items()})
            else:
                out[k] = v
        return out

    @classmethod
    def from_flat(cls, items: dict[str, str], base: RunConfig | None = None) -> RunConfig:
        """Build from dotted ``key=value`` strings layered over ``base`` (defaults if None)."""
        nested = (base or cls()).to_dict()
        for key, raw in items.items():
            if key == "bits":
                e, w, a = parse_bits(raw)
                nested["model"].update(bits_embed=e, bits_weight=w, bits_act=a)
                continue
            section, _, leaf = key.rpartition(".")
            target = nested[section] if section else nested
            if section and section not in ("model", "task", "kd"):
                raise ValueError(f"unknown config section {section!r}")
            if leaf not in target:
                raise ValueError(f"unknown config key {key!r}")
            target[leaf] = _coerce(raw, target[leaf])
        return cls.from_dict(nested)

    def student_model(self) -> ModelConfig:
        weight_method, act_method = self.ablation.methods
        d = self.model.to_dict()
        d.update(weight_method=weight_method, act_method=act_method)
        return ModelConfig.from_dict(d)

    def teacher_model(self) -> ModelConfig:
        d = self.model.to_dict()
        d.update(bits_embed=32, bits_weight=32, bits_act=32)
        return ModelConfig.from_dict(d)


def parse_bits(text: str) -> tuple[int, int, int]:
    """Parse an ``E-W-A`` bit-width triple such as ``2-2-2``."""
    parts = str(text).split("-")
    try:
        bits = tuple(int(p) for p in parts)
    except ValueError:
        bits = ()
    if len(bits) != 3:
        raise ValueError(f"bits must look like E-W-A, got {text!r}")
    bad = [b for b in bits if b not in VALID_BITS]
    if bad:
        raise ValueError(f"bit widths must be in {VALID_BITS}, got {text!r}")
    return bits


def _coerce(raw, current):
    if not isinstance(raw, str):
        return raw
    if isinstance(current, bool):
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1")
    if isinstance(current, int) and not isinstance(current, enum.Enum):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def datasets(cfg: RunConfig):
    train = generate(cfg.task, cfg.train_size)
    held = TaskSpec(cfg.task.kind, cfg.task.vocab_size, cfg.task.min_len, cfg.task.max_len,
                    cfg.task.seed + EVAL_SEED_OFFSET)
    return train, generate(held, cfg.eval_size)


def batches(pairs, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(pairs))
    for start in range(0, len(order), batch_size):
        yield make_batch([pairs[i] for i in order[start: start + batch_size]])


def lr_at(step: int, total: int, base: float, warmup: int) -> float:
    if step < warmup:
        return base * (step + 1) / warmup
    frac = (step - warmup) / max(total - warmup, 1)
    return base * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0))))


def _teacher_forced_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    valid = labels != PAD
    return float(((logits.argmax(-1) == labels) & valid).sum() / max(valid.sum(), 1))


@dataclass
class TrainResult:
    model: Seq2Seq
    history: list[dict]
    report: EvalReport | None = None


def _fit(model: Seq2Seq, cfg: RunConfig, loss_fn: Callable, log_row: Callable | None) -> list[dict]:
    train, _ = datasets(cfg)
    opt = tg.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    history, step = [], 0
    model.train()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses, accs = [], []
        for src, tgt_in, labels in batches(train, cfg.batch_size, rng):
            opt.lr = lr_at(step, total, cfg.lr, cfg.warmup_steps)
            loss, logits = loss_fn(src, tgt_in, labels)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
            accs.append(_teacher_forced_accuracy(logits, labels))
            step += 1
        row = {"epoch": epoch + 1, "step": step, "loss": float(np.mean(losses)),
               "train_token_acc": float(np.mean(accs)), "lr": opt.lr,
               "seconds": time.perf_counter() - t0}
        history.append(row)
        log.info(" ".join(f"{k}={v}" for k, v in row.items()))
        if log_row is not None:
            log_row(row)
    model.eval()
    return history


def train_teacher(cfg: RunConfig, log_row: Callable | None = None, evaluate_after: bool = True) -> TrainResult:
    model = Seq2Seq(cfg.teacher_model(), seed=cfg.seed)

    def loss_fn(src, tgt_in, labels):
        out = model(src, tgt_in)
        return tg.cross_entropy(out.logits, labels, ignore_index=PAD), out.logits.data

    history = _fit(model, cfg, loss_fn, log_row)
    report = evaluate(model, datasets(cfg)[1]) if evaluate_after else None
    return TrainResult(model, history, report)


def train_student(cfg: RunConfig, teacher: Seq2Seq, log_row: Callable | None = None,
                  evaluate_after: bool = True) -> TrainResult:
    student = init_student_from_teacher(teacher, cfg.student_model(), seed=cfg.seed)
    teacher.eval()

    def loss_fn(src, tgt_in, labels):
        with tg.no_grad():
            t_out = teacher(src, tgt_in)
        s_out = student(src, tgt_in)
        loss, _ = distill_loss(s_out, t_out, labels, src, cfg.kd)
        return loss, s_out.logits.data

    history = _fit(student, cfg, loss_fn, log_row)
    report = evaluate(student, datasets(cfg)[1]) if evaluate_after else None
    return TrainResult(student, history, report)
