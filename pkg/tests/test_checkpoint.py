import numpy as np
import pytest

from tbtkit import tensorgrad as tg
from tbtkit.checkpoint import (
    FormatError,
    export_packed,
    load_checkpoint,
    load_packed,
    pack_model,
    save_checkpoint,
)
from tbtkit.model import ModelConfig, Seq2Seq
from tbtkit.tasks import TaskSpec, generate, make_batch
from tbtkit.train import RunConfig

TASK = TaskSpec(vocab_size=20, min_len=2, max_len=6)


def small(bits="2-2-2", ablation="both", d_model=16):
    e, w, a = map(int, bits.split("-"))
    run = RunConfig(model=ModelConfig(vocab_size=20, d_model=d_model, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                                      d_ffn=24, max_seq_len=12, bits_embed=e, bits_weight=w, bits_act=a),
                    task=TASK, ablation=ablation, seed=3)
    model = Seq2Seq(run.student_model(), seed=3)
    src, tgt, _ = make_batch(generate(TASK, 8))
    model(src, tgt)  # calibrate activation scales
    model.eval()
    return model, run, (src, tgt)


def logits(model, data):
    with tg.no_grad():
        return model(*data).logits.data


@pytest.mark.parametrize("bits,ablation", [("2-2-2", "both"), ("1-1-1", "both"), ("2-2-2", "baseline"),
                                           ("2-2-2", "act_only"), ("2-2-8", "both"), ("32-32-32", "both")])
def test_checkpoint_round_trip_is_bit_identical(tmp_path, bits, ablation):
    model, run, data = small(bits, ablation)
    save_checkpoint(tmp_path / "m.ckpt", model, run)
    back, run2 = load_checkpoint(tmp_path / "m.ckpt")
    assert run2 == run
    assert back.cfg == model.cfg
    assert np.array_equal(logits(back, data), logits(model, data))


@pytest.mark.parametrize("bits,ablation", [("2-2-2", "both"), ("1-1-1", "both"), ("2-1-2", "both"),
                                           ("2-2-2", "baseline"), ("1-1-1", "weight_only")])
def test_packed_export_reproduces_fake_quant(tmp_path, bits, ablation):
    model, run, data = small(bits, ablation)
    summary = export_packed(tmp_path / "m.packed", model, run)
    assert summary.matrices == len(model.quantized_matrices())
    packed, _ = load_packed(tmp_path / "m.packed")
    assert np.array_equal(logits(packed, data), logits(model, data))


def test_export_ratio_accounting(tmp_path):
    model, run, _ = small("2-2-2")
    s = export_packed(tmp_path / "m.packed", model, run)
    assert s.float32_payload_bytes == 4 * s.elements
    assert s.packed_payload_bytes == sum(kp.payload_bytes() for kp in pack_model(model).values())
    assert s.file_bytes > s.packed_payload_bytes


def test_square_64_matrix_payload_closed_form():
    from tbtkit import kernels
    from tbtkit.model import quantize_weight
    from tbtkit.quantcore import QuantKind

    w = np.random.default_rng(0).normal(size=(64, 64))
    # per row: one 64-bit word per stored plane plus an f32 scale
    tern = kernels.pack(quantize_weight(w, QuantKind.TERNARY_WEIGHT)[0])
    assert 4 * w.size / tern.payload_bytes() == pytest.approx(16384 / 1280)
    binary = kernels.pack(quantize_weight(w, QuantKind.BINARY_WEIGHT)[0])
    assert 4 * w.size / binary.payload_bytes() == pytest.approx(16384 / 768)


def test_export_rejects_unpackable_models(tmp_path):
    model, run, _ = small("32-32-32")
    with pytest.raises(ValueError):
        export_packed(tmp_path / "x", model, run)
    model, run, _ = small("8-8-8")
    with pytest.raises(ValueError):
        export_packed(tmp_path / "x", model, run)


def test_corrupt_files_raise_format_error(tmp_path):
    model, run, _ = small()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, run)
    raw = path.read_bytes()
    (tmp_path / "bad_magic").write_bytes(b"XXXXXXXX" + raw[8:])
    (tmp_path / "short").write_bytes(raw[: len(raw) // 2])
    (tmp_path / "version").write_bytes(raw[:8] + (99).to_bytes(4, "little") + raw[12:])
    for name in ("bad_magic", "short", "version"):
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / name)
    with pytest.raises(FormatError):
        load_packed(path)
