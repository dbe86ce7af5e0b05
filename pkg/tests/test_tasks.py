import numpy as np
import pytest

from tbtkit.model import BOS, EOS, PAD, ModelConfig, Seq2Seq
from tbtkit.tasks import (
    EvalReport,
    TaskKind,
    TaskSpec,
    dump_dataset,
    evaluate,
    generate,
    load_dataset,
    make_batch,
    score,
    source_batch,
)
from tbtkit.train import RunConfig, batches, datasets, lr_at, parse_bits


def test_generate_is_seeded_and_in_range():
    spec = TaskSpec(TaskKind.REVERSE, vocab_size=10, min_len=2, max_len=5, seed=3)
    a, b = generate(spec, 50), generate(spec, 50)
    assert a == b
    for src, tgt in a:
        assert 2 <= len(src) <= 5
        assert all(3 <= t < 10 for t in src)
        assert tgt == src[::-1]
    assert generate(TaskSpec(seed=4), 5) != generate(TaskSpec(seed=5), 5)


def test_task_targets():
    expect = {TaskKind.COPY: lambda s: s, TaskKind.REVERSE: lambda s: s[::-1], TaskKind.SORT_DIGITS: sorted}
    for kind, fn in expect.items():
        pairs = generate(TaskSpec(kind, vocab_size=10, min_len=3, max_len=3), 20)
        assert all(t == fn(s) for s, t in pairs)


def test_task_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec(vocab_size=3)
    with pytest.raises(ValueError):
        TaskSpec(min_len=5, max_len=4)
    with pytest.raises(ValueError):
        TaskSpec(kind="shuffle")
    with pytest.raises(ValueError):
        TaskSpec(max_len=30).check_fits(32)
    TaskSpec(max_len=29).check_fits(32)


def test_make_batch_layout():
    src, tgt_in, labels = make_batch([([4, 5], [5, 4]), ([6], [6])])
    assert src.tolist() == [[4, 5, EOS], [6, EOS, PAD]]
    assert tgt_in.tolist() == [[BOS, 5, 4], [BOS, 6, PAD]]
    assert labels.tolist() == [[5, 4, EOS], [6, EOS, PAD]]
    assert source_batch([[7], [8, 9]]).tolist() == [[7, EOS, PAD], [8, 9, EOS]]


def test_score_metrics():
    r = score([[1, 2, 3], [4, 5], [7, 7, 7, 7]], [[1, 2, 3], [4, 6], [7]], cap=4)
    assert r.token_accuracy == pytest.approx((3 + 1 + 1) / 6)
    assert r.sequence_accuracy == pytest.approx(1 / 3)
    assert r.avg_gen_length == 3 and r.avg_ref_length == 2
    assert r.capped_fraction == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        score([[1]], [])
    with pytest.raises(ValueError):
        EvalReport(1.5, 0.0, 0.0, 0.0)


def test_dataset_file_round_trip(tmp_path):
    pairs = generate(TaskSpec(seed=1), 10)
    dump_dataset(pairs, tmp_path / "d.txt")
    assert load_dataset(tmp_path / "d.txt") == pairs


def test_heldout_split_differs_from_train():
    cfg = RunConfig(train_size=100, eval_size=20)
    train, held = datasets(cfg)
    assert len(train) == 100 and len(held) == 20
    assert train[:20] != held


def test_evaluate_reports_entropy_and_bounds():
    m = Seq2Seq(ModelConfig(vocab_size=12, d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ffn=16,
                            max_seq_len=12, bits_embed=2, bits_weight=2, bits_act=2), seed=0)
    data = generate(TaskSpec(vocab_size=12, min_len=2, max_len=4), 6)
    r = evaluate(m, data, batch_size=4)
    assert r.n == 6 and 0 <= r.token_accuracy <= 1
    assert len(r.layer_entropy) == len(m.quantized_matrices())
    assert all(0 < e <= np.log(3) + 1e-12 for e in r.layer_entropy)


def test_schedule_and_batches():
    assert lr_at(0, 1000, 1.0, 100) == pytest.approx(0.01)
    assert lr_at(99, 1000, 1.0, 100) == pytest.approx(1.0)
    assert lr_at(999, 1000, 1.0, 100) == pytest.approx(0.1, abs=1e-3)
    pairs = [([3 + i], [3 + i]) for i in range(10)]
    seen = [int(t) for src, _, _ in batches(pairs, 3, np.random.default_rng(0)) for t in src[:, 0]]
    assert sorted(seen) == list(range(3, 13))


def test_run_config_flat_round_trip():
    cfg = RunConfig.from_flat({"bits": "2-1-8", "model.d_model": "32", "task.kind": "reverse",
                               "kd.temperature": "2.5", "lr": "0.01", "ablation": "act_only"})
    assert cfg.model.d_model == 32 and cfg.task.kind is TaskKind.REVERSE
    assert cfg.kd.temperature == 2.5 and cfg.lr == 0.01
    assert cfg.student_model().bits == "2-1-8"
    assert cfg.student_model().act_method == "elastic" and cfg.student_model().weight_method == "baseline"
    assert cfg.teacher_model().bits == "32-32-32"
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert RunConfig.from_flat({k: str(v) for k, v in cfg.flat().items()}) == cfg
    with pytest.raises(ValueError):
        RunConfig.from_flat({"nope": "1"})
    with pytest.raises(ValueError):
        parse_bits("2-2")
    with pytest.raises(ValueError):
        RunConfig(epochs=0)
