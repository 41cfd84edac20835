import numpy as np
import pytest

from scoreattn.encoders import AnswerVocabulary
from scoreattn.errors import ConfigError
from scoreattn.optim import Adam, AdamState, adam_step, clip_global_norm, global_norm, lr_at
from scoreattn.pipeline import ModelConfig
from scoreattn.synthetic import SyntheticSpec, generate_synthetic
from scoreattn.tensor import Parameter
from scoreattn.training import TrainConfig, evaluate_model, make_batches, soft_targets, stream, train


def tiny(task):
    spec = SyntheticSpec(n_train=48, n_test=10, R=4, L=4, feature_width=24, n_classes=5, seed=3)
    model = ModelConfig(d=8, heads=2, task=task, max_regions=4, max_question_len=4, max_caption_len=4,
                        feature_width=24, word_dim=8)
    return generate_synthetic(task, spec), model


def test_lr_schedule():
    assert [lr_at(1.0, e) for e in (0, 9, 10, 19, 20, 29)] == [1.0, 1.0, 0.1, 0.1, 0.01, 0.01]
    assert lr_at(0.5, 4, decay_factor=2.0, decay_every=2) == 0.125
    with pytest.raises(ValueError):
        lr_at(1.0, -1)


def test_clip_global_norm():
    g = [np.array([3.0, 4.0])]
    assert clip_global_norm(g, 2.0) == pytest.approx(0.4)
    np.testing.assert_allclose(g[0], [1.2, 1.6])
    small = [np.array([0.3]), None, np.array([0.4])]
    assert clip_global_norm(small, 2.0) == 1.0
    big = [np.full(5, 1e30), np.full(3, -1e30)]
    clip_global_norm(big, 2.0)
    assert global_norm(big) <= 2.0 + 1e-12


def test_adam_step_first_update_is_lr_times_sign():
    p = Parameter(np.array([1.0, -2.0, 0.5]))
    state = AdamState.for_params([p])
    adam_step(state, [p], [np.array([0.1, -3.0, 0.0])], lr=0.01)
    np.testing.assert_allclose(p.data, [0.99, -1.99, 0.5], atol=1e-6)


def test_adam_class_matches_reference_step(f64, rng):
    values = [rng.normal(size=(3, 2)), rng.normal(size=4)]
    a = [Parameter(v.copy()) for v in values]
    b = [Parameter(v.copy()) for v in values]
    opt = Adam(a)
    state = AdamState.for_params(b)
    for step in range(5):
        grads = [rng.normal(size=v.shape) for v in values]
        for p, g in zip(a, grads):
            p.grad = g.copy()
        opt.step(1e-2)
        adam_step(state, b, grads, 1e-2)
    for p, q in zip(a, b):
        np.testing.assert_allclose(p.data, q.data, atol=1e-15)


def test_adam_frozen_trajectory(f64):
    p = Parameter(np.array([0.5, -0.5]))
    state = AdamState.for_params([p])
    for g in ([1.0, 2.0], [-1.0, 0.5], [0.25, 0.25]):
        adam_step(state, [p], [np.array(g)], lr=0.1)
    np.testing.assert_allclose(p.data, FROZEN_ADAM, atol=1e-12)


# three steps of a scalar pure-Python Adam loop (beta 0.9/0.999, eps 1e-8)
FROZEN_ADAM = np.array([0.39814097586698693, -0.75449510419588])


def test_make_batches_plain():
    batches = make_batches(np.arange(10), 4)
    assert [len(b) for b in batches] == [4, 4, 2]


def test_make_batches_distinct_keys():
    keys = ["a", "a", "b", "a", "c", "b", "d"]
    batches = make_batches(np.arange(7), 3, keys)
    assert sorted(np.concatenate(batches).tolist()) == list(range(7))
    for b in batches:
        assert len({keys[i] for i in b}) == len(b) <= 3
    assert batches[0].tolist() == [0, 2, 4]


def test_soft_targets():
    vocab = AnswerVocabulary(["no", "yes"])
    t = soft_targets(["yes"] * 5 + ["no"] * 2 + ["maybe"] * 3, vocab)
    np.testing.assert_allclose(t, [2 / 3, 1.0])


def test_streams_are_independent_and_reproducible():
    assert stream(0, 1).integers(1 << 30) == stream(0, 1).integers(1 << 30)
    assert stream(0, 1).integers(1 << 30) != stream(0, 2).integers(1 << 30)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch=1).validate("retrieval")
    TrainConfig(batch=1).validate("vqa")
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0).validate("vqa")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})
    assert TrainConfig().learning_rate("vqa") == 0.0005


@pytest.mark.parametrize("task", ["retrieval", "vqa"])
def test_tiny_training_is_deterministic_and_logs_every_step(tmp_path, task):
    dataset, model = tiny(task)
    cfg = TrainConfig(batch=8, epochs=2, lr=1e-3, warmup_epochs=1, eval_folds=2)
    a = train(model, cfg, dataset, loss_csv=tmp_path / "a.csv")
    b = train(model, cfg, dataset, loss_csv=tmp_path / "b.csv")
    text = (tmp_path / "a.csv").read_bytes()
    assert text == (tmp_path / "b.csv").read_bytes()
    lines = text.decode().splitlines()
    assert lines[0] == "epoch,step,loss,lr"
    assert len(lines) - 1 == len(a.losses)
    assert a.initial_loss == a.task_losses[0]
    assert a.final_loss == a.epoch_losses[-1]
    assert len(a.epoch_losses) == 2
    assert a.report.to_dict() == b.report.to_dict()


def test_training_reduces_vqa_loss():
    dataset, model = tiny("vqa")
    result = train(model, TrainConfig(batch=8, epochs=6, lr=3e-3), dataset, evaluate=False)
    assert result.final_loss < result.initial_loss
    assert result.report is None


def test_train_rejects_task_mismatch():
    dataset, model = tiny("vqa")
    model.task = "retrieval"
    with pytest.raises(ConfigError):
        train(model, TrainConfig(epochs=1), dataset)


def test_evaluate_model_reports(tmp_path):
    dataset, model = tiny("retrieval")
    result = train(model, TrainConfig(batch=8, epochs=1, lr=1e-3), dataset, evaluate=False)
    report = evaluate_model(result.model, dataset.test, result.vocab, None, folds=2)
    metrics = report.metrics
    assert set(metrics) >= {"image_r@1", "text_r@1", "text_r@10"}
    assert 0 <= metrics["text_r@1"] <= metrics["text_r@5"] <= metrics["text_r@10"] <= 100
    assert result.model.training  # evaluation restores training mode
