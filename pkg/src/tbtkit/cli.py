"""Command-line front end.

Every subcommand reads an optional ``--config`` file of ``key=value`` lines
(dotted keys such as ``model.d_model``; ``#`` starts a comment). Any key can
also be given as a flag of the same name, e.g. ``--model.d_model 32``, and
flags win over the file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .checkpoint import (
    CHECKPOINT_MAGIC,
    FormatError,
    export_packed,
    load_checkpoint,
    load_packed,
    save_checkpoint,
)
from .model import Seq2Seq, quantize_weight
from .quantcore import entropy_of, level_proportions
from .tasks import dump_dataset, evaluate
from .train import RunConfig, TrainingDiverged, datasets, train_student, train_teacher

log = logging.getLogger("tbtkit")

HIST_BINS = 64


class CliError(Exception):
    pass


# --- config ---------------------------------------------------------------------

def read_config_file(path) -> dict[str, str]:
    items = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e.strerror}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"{path}:{lineno}: expected key=value")
        items[key.strip()] = value.strip()
    return items


def parse_overrides(extra: list[str]) -> dict[str, str]:
    """Turn leftover ``--key value`` / ``--key=value`` arguments into config items."""
    items, i = {}, 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--"):
            raise CliError(f"unexpected argument {arg!r}")
        key, sep, value = arg[2:].partition("=")
        if not sep:
            if i + 1 >= len(extra):
                raise CliError(f"missing value for {arg}")
            value = extra[i + 1]
            i += 1
        items[key.replace("-", "_")] = value
        i += 1
    return items


def build_config(args, extra: list[str], base: RunConfig | None = None) -> RunConfig:
    items = read_config_file(args.config) if args.config else {}
    items.update(parse_overrides(extra))
    for name in ("seed", "bits", "ablation"):
        value = getattr(args, name, None)
        if value is not None:
            items[name] = str(value)
    try:
        return RunConfig.from_flat(items, base)
    except (ValueError, TypeError) as e:
        raise CliError(f"invalid configuration: {e}") from None


# --- output helpers -------------------------------------------------------------------

def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise CliError(f"output directory {out} is not writable: {e.strerror}") from None
    return out


def format_row(row: dict) -> str:
    return " ".join(f"{k}={_fmt(v)}" for k, v in row.items())


def _fmt(v) -> str:
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w") as f:
        f.write("\t".join(header) + "\n")
        for row in rows:
            f.write("\t".join(_fmt(v) for v in row) + "\n")


def read_table(path) -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text().splitlines()
    return lines[0].split("\t"), [line.split("\t") for line in lines[1:]]


class MetricsLog:
    def __init__(self, path):
        self.path = Path(path)
        self.path.write_text("")

    def __call__(self, row: dict):
        with open(self.path, "a") as f:
            f.write(format_row(row) + "\n")


def read_metrics(path) -> list[dict[str, str]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        rows.append(dict(item.split("=", 1) for item in line.split()))
    return rows


def _load_any(path) -> tuple[Seq2Seq, RunConfig]:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"no such checkpoint: {path}")
    try:
        with open(path, "rb") as f:
            magic = f.read(len(CHECKPOINT_MAGIC))
        return load_checkpoint(path) if magic == CHECKPOINT_MAGIC else load_packed(path)
    except FormatError as e:
        raise CliError(f"{path}: {e}") from None


# --- histogram report -----------------------------------------------------------------

def histogram_report(model: Seq2Seq) -> tuple[list[list], list[list]]:
    """Per quantized matrix: level proportions + entropy, and a real-weight histogram."""
    level_rows, hist_rows = [], []
    for name, param, kind in model.quantized_matrices():
        q, _ = quantize_weight(param.data, kind)
        props = level_proportions(q)
        w = param.data
        counts, edges = np.histogram(w, bins=HIST_BINS)
        level_rows.append([name, kind.value, *w.shape,
                           props.get(-1, 0.0), props.get(0, 0.0), props.get(1, 0.0), entropy_of(props)])
        hist_rows.append([name, float(edges[0]), float(edges[-1]), *counts.tolist()])
    return level_rows, hist_rows


LEVEL_HEADER = ["matrix", "kind", "rows", "cols", "p_neg", "p_zero", "p_pos", "entropy_nats"]
HIST_HEADER = ["matrix", "lo", "hi"] + [f"bin{i}" for i in range(HIST_BINS)]


# --- subcommands --------------------------------------------------------------------------

def _train(args, extra, teacher_path=None):
    cfg = build_config(args, extra)
    out = _out_dir(args.out or cfg.output_dir)
    metrics = MetricsLog(out / "metrics.log")
    if args.dump_data:
        train, held = datasets(cfg)
        dump_dataset(train, out / "train.txt")
        dump_dataset(held, out / "eval.txt")
    try:
        if teacher_path is None:
            result = train_teacher(cfg, log_row=metrics)
        else:
            teacher, _ = _load_any(teacher_path)
            result = train_student(cfg, teacher, log_row=metrics)
    except TrainingDiverged as e:
        raise CliError(f"training diverged: {e}") from None
    save_checkpoint(out / "model.ckpt", result.model, cfg)
    row = {"split": "eval", "bits": result.model.cfg.bits, "ablation": cfg.ablation.value, **result.report.to_row()}
    metrics(row)
    (out / "report.txt").write_text(format_row(row) + "\n")
    print(format_row(row))
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_train_teacher(args, extra):
    return _train(args, extra)


def cmd_train_student(args, extra):
    if not args.teacher:
        raise CliError("train-student needs --teacher CHECKPOINT")
    return _train(args, extra, teacher_path=args.teacher)


def cmd_eval(args, extra):
    model, run = _load_any(args.ckpt)
    cfg = build_config(args, extra, base=run)
    task = cfg.task
    try:
        task.check_fits(model.cfg.max_seq_len)
    except ValueError as e:
        raise CliError(str(e)) from None
    _, held = datasets(cfg)
    report = evaluate(model, held)
    row = {"task": task.kind.value, "bits": model.cfg.bits, **report.to_row()}
    print(format_row(row))
    if args.out:
        out = _out_dir(args.out)
        write_table(out / "eval.tsv", list(row), [list(row.values())])
    return 0


def cmd_report_hist(args, extra):
    model, _ = _load_any(args.ckpt)
    level_rows, hist_rows = histogram_report(model)
    if not level_rows:
        raise CliError("checkpoint has no quantized matrices (32-bit model)")
    out = _out_dir(args.out or Path(args.ckpt).parent)
    write_table(out / "levels.tsv", LEVEL_HEADER, level_rows)
    write_table(out / "hist.tsv", HIST_HEADER, hist_rows)
    for row in level_rows:
        print(f"{row[0]}\tentropy={row[-1]:.6f}")
    print(f"wrote {out / 'levels.tsv'} and {out / 'hist.tsv'}")
    return 0


def cmd_export_packed(args, extra):
    model, run = _load_any(args.ckpt)
    out = Path(args.out or Path(args.ckpt).with_suffix(".packed"))
    _out_dir(out.parent)
    try:
        summary = export_packed(out, model, run)
    except ValueError as e:
        raise CliError(str(e)) from None
    print(format_row(summary.to_row()))
    print(f"size ratio vs 32-bit: {summary.ratio:.2f}x")
    return 0


def _parse_shape(text: str) -> tuple[int, int, int]:
    try:
        m, k, n = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise CliError(f"shape must look like MxKxN, got {text!r}") from None
    if min(m, k, n) < 1:
        raise CliError(f"shape dims must be positive, got {text!r}")
    return m, k, n


def cmd_bench(args, extra):
    if extra:
        raise CliError(f"unexpected arguments: {' '.join(extra)}")
    shapes = [_parse_shape(s) for s in args.shapes]
    try:
        rows = kernels.bench(args.op, shapes, repeats=args.repeats, seed=args.seed or 0)
    except ValueError as e:
        raise CliError(str(e)) from None
    header = list(rows[0])
    print("\t".join(header))
    for row in rows:
        print("\t".join(_fmt(row[h]) for h in header))
    if args.out:
        out = _out_dir(args.out)
        write_table(out / "bench.tsv", header, [[r[h] for h in header] for r in rows])
    return 0


# --- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (file for export-packed)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tbtkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(fn=fn)
        return p

    p = add("train-teacher", cmd_train_teacher, "train a full-precision teacher")
    p.add_argument("--dump-data", action="store_true", help="also write the train/eval pairs as text")
    p = add("train-student", cmd_train_student, "distill a quantized student from a teacher")
    p.add_argument("--teacher", help="teacher checkpoint")
    p.add_argument("--bits", help="E-W-A bit widths, e.g. 2-2-2")
    p.add_argument("--ablation", choices=["both", "weight_only", "act_only", "baseline"])
    p.add_argument("--dump-data", action="store_true")
    p = add("eval", cmd_eval, "evaluate a checkpoint or packed export on held-out data")
    p.add_argument("ckpt")
    p = add("report-hist", cmd_report_hist, "per-matrix level proportions, entropy and histograms")
    p.add_argument("ckpt")
    p = add("export-packed", cmd_export_packed, "write a bit-packed inference file")
    p.add_argument("ckpt")
    p = add("bench", cmd_bench, "time packed GEMM against the float reference")
    p.add_argument("--op", default="binary", choices=["binary", "ternary"])
    p.add_argument("--shapes", nargs="+", default=["512x512x512"], help="MxKxN shapes")
    p.add_argument("--repeats", type=int, default=5)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.fn(args, extra)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
