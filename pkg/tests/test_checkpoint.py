import numpy as np
import pytest

from scoreattn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from scoreattn.encoders import AnswerVocabulary, build_vocab
from scoreattn.pipeline import ModelConfig, VisualSemanticModel
from scoreattn.tensor import precision_dtype


def make_model(rng, task="vqa"):
    config = ModelConfig(d=8, heads=2, k=2, task=task, max_regions=3, max_question_len=4, max_caption_len=4,
                         feature_width=5, word_dim=4)
    vocab = build_vocab(["a b c"], 1)
    answers = AnswerVocabulary(["no", "yes"]) if task == "vqa" else None
    return VisualSemanticModel(config, len(vocab), 2 if answers else 0, rng), vocab, answers


@pytest.mark.parametrize("task", ["vqa", "retrieval"])
def test_round_trip_preserves_parameters_and_outputs(tmp_path, rng, task):
    model, vocab, answers = make_model(rng, task)
    save_checkpoint(tmp_path / "m.ckpt", model, vocab, answers, extra={"note": 1})
    back, vocab2, answers2, header = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == model.config
    assert vocab2.tokens == vocab.tokens
    assert (answers2.answers if answers2 else None) == (answers.answers if answers else None)
    assert header["extra"] == {"note": 1}
    for (name, p), (name2, q) in zip(model.named_parameters(), back.named_parameters()):
        assert name == name2
        np.testing.assert_array_equal(p.data, q.data)
    regions = rng.normal(size=(2, 3, 5))
    tokens = np.array([[2, 3, 0, 0], [4, 2, 3, 0]])
    model.eval(), back.eval()
    np.testing.assert_array_equal(model(regions, tokens)[0].data, back(regions, tokens)[0].data)


def test_float64_checkpoint(tmp_path, f64, rng):
    model, vocab, answers = make_model(rng)
    save_checkpoint(tmp_path / "m.ckpt", model, vocab, answers, precision=64)
    back, *_ = load_checkpoint(tmp_path / "m.ckpt")
    assert back.parameters()[0].dtype == precision_dtype(64)


def test_corrupted_files_raise(tmp_path, rng):
    model, vocab, answers = make_model(rng)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, vocab, answers)
    raw = path.read_bytes()
    cases = {"magic": b"XXXX" + raw[4:], "version": raw[:4] + b"\x09" + raw[5:],
             "truncated": raw[:-7], "trailing": raw + b"\0", "header": raw[:9] + b"[" + raw[10:],
             "empty": b""}
    for name, data in cases.items():
        bad = tmp_path / f"{name}.ckpt"
        bad.write_bytes(data)
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
