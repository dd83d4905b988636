"""Optimizer oracles, checkpoint round trips, training determinism."""

import numpy as np
import pytest

import got.autodiff as ad
from got.config import TrainConfig
from got.datasets import generate_synthetic_corpus
from got.errors import (
    CheckpointCorruptionError,
    CheckpointTaskMismatchError,
    CheckpointVersionError,
    TrainingDivergedError,
    ValidationError,
)
from got.trainer import (
    Checkpoint,
    ModelParams,
    init_model,
    init_velocity,
    load_checkpoint,
    save_checkpoint,
    sgd_update,
    train,
    train_step,
)


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_corpus(4, seed=3)


def toy_config(**kw):
    base = dict(task="caption", iterations=5, seed=1, checkpoint_every=1000, min_count=1)
    base.update(kw)
    return TrainConfig.preset("toy", **base)


def fresh_model(corpus, **kw):
    config = toy_config(**kw)
    vocab = corpus.build_vocabulary(config.min_count)
    return config, vocab, init_model(config, vocab, corpus.superclass_names)


# -- optimizer oracles ----------------------------------------------------------

def test_sgd_weight_decay_closed_form():
    # gradient zero, momentum zero: theta scales by (1 - lr * decay) per step
    t = ad.Tensor(np.array([2.0, -3.0], dtype=np.float32), requires_grad=True)
    params = _single_param_model(t)
    velocity = init_velocity(params)
    lr, decay = 0.1, 0.5
    expected = t.data.copy()
    for _ in range(3):
        t.grad = np.zeros_like(t.data)
        sgd_update(params, velocity, lr, momentum=0.0, weight_decay=decay)
        expected = expected * (1 - lr * decay)
        np.testing.assert_allclose(t.data, expected, rtol=1e-6)


def test_sgd_momentum_two_step_hand_calculation():
    # quadratic loss 0.5 * a * theta^2: gradient a * theta
    a = 2.0
    theta0, lr, mu = 1.0, 0.1, 0.9
    t = ad.Tensor(np.array([theta0], dtype=np.float64), requires_grad=True)
    params = _single_param_model(t)
    velocity = init_velocity(params)
    # step 1: v1 = -lr * a * theta0 ; theta1 = theta0 + v1
    t.grad = np.array([a * float(t.data[0])])
    sgd_update(params, velocity, lr, momentum=mu, weight_decay=0.0)
    v1 = -lr * a * theta0
    theta1 = theta0 + v1
    np.testing.assert_allclose(t.data, [theta1], atol=1e-12)
    # step 2: v2 = mu * v1 - lr * a * theta1 ; theta2 = theta1 + v2
    t.grad = np.array([a * float(t.data[0])])
    sgd_update(params, velocity, lr, momentum=mu, weight_decay=0.0)
    theta2 = theta1 + (mu * v1 - lr * a * theta1)
    np.testing.assert_allclose(t.data, [theta2], atol=1e-12)


def test_sgd_gradient_clipping_rescales():
    t = ad.Tensor(np.array([0.0, 0.0], dtype=np.float64), requires_grad=True)
    params = _single_param_model(t)
    velocity = init_velocity(params)
    t.grad = np.array([3.0, 4.0])  # norm 5
    sgd_update(params, velocity, learning_rate=1.0, momentum=0.0, weight_decay=0.0, grad_clip=1.0)
    np.testing.assert_allclose(t.data, [-0.6, -0.8], atol=1e-12)


def _single_param_model(t):
    return ModelParams(task="caption", mode="OCN2", widths=TrainConfig.preset("toy").widths,
                       backbone=TrainConfig.preset("toy").backbone, superclass_names=("x",),
                       vocab=_tiny_vocab(), n_steps=6, tensors={"p": t})


def _tiny_vocab():
    from got.datasets import build_vocabulary

    return build_vocabulary([["a"]], min_count=1)


# -- train_step -------------------------------------------------------------------

def test_zero_learning_rate_keeps_parameters(corpus):
    config, vocab, params = fresh_model(corpus, learning_rate=0.0)
    before = {k: t.data.copy() for k, t in params.tensors.items()}
    breakdown = train_step(corpus[0], params, init_velocity(params), config, np.random.default_rng(0))
    assert set(breakdown) >= {"rpn_objectness", "rpn_box", "loc", "superclass", "caption", "total"}
    for k, t in params.tensors.items():
        np.testing.assert_array_equal(before[k], t.data)


def test_breakdown_items_nonnegative_and_sum_to_total(corpus):
    config, vocab, params = fresh_model(corpus)
    breakdown = train_step(corpus[0], params, init_velocity(params), config, np.random.default_rng(0))
    items = [v for k, v in breakdown.items() if k != "total"]
    assert all(v >= 0 for v in items)
    assert abs(sum(items) - breakdown["total"]) < 1e-6


def test_nonfinite_loss_aborts_with_diagnostics(corpus):
    config, vocab, params = fresh_model(corpus)
    params.tensors["det/cls/w"].data[:] = np.nan
    with pytest.raises(TrainingDivergedError) as err:
        train_step(corpus[0], params, init_velocity(params), config, np.random.default_rng(0), iteration=7)
    assert err.value.diagnostics["iteration"] == 7
    assert "losses" in err.value.diagnostics


def test_train_step_updates_parameters(corpus):
    config, vocab, params = fresh_model(corpus, learning_rate=0.01)
    before = {k: t.data.copy() for k, t in params.tensors.items()}
    train_step(corpus[0], params, init_velocity(params), config, np.random.default_rng(0))
    changed = sum(not np.array_equal(before[k], t.data) for k, t in params.tensors.items())
    assert changed > len(params.tensors) // 2


# -- train loop ---------------------------------------------------------------------

def test_train_deterministic_digest(corpus):
    config = toy_config(iterations=6, seed=11, learning_rate=0.01)
    first = train(corpus, config)
    second = train(corpus, config)
    assert first[-1].digest == second[-1].digest
    third = train(corpus, toy_config(iterations=6, seed=12, learning_rate=0.01))
    assert third[-1].digest != first[-1].digest


def test_train_loss_history_finite_and_checkpoint_cadence(corpus, tmp_path):
    config = toy_config(iterations=7, seed=2, checkpoint_every=3, learning_rate=0.01)
    checkpoints = train(corpus, config, out_dir=tmp_path)
    # cadence 3 -> iterations 3 and 6, plus the final one at 7
    assert [c.manifest["iteration"] for c in checkpoints] == [3, 6, 7]
    for c in checkpoints:
        assert np.all(np.isfinite(c.manifest["loss_history_tail"]))
    assert sorted(p.name for p in tmp_path.glob("*.zip")) == [
        "checkpoint-000003.zip", "checkpoint-000006.zip", "checkpoint-000007.zip"]


def test_train_empty_dataset_rejected(corpus):
    from got.datasets import Dataset

    with pytest.raises(ValidationError):
        train(Dataset([], corpus.superclass_names), toy_config())


def test_train_vocab_mismatch_rejected(corpus):
    from got.datasets import build_vocabulary

    config = toy_config()
    wrong_vocab = build_vocabulary([["completely"], ["different"], ["words"]], min_count=1)
    params = init_model(config, wrong_vocab, corpus.superclass_names)
    with pytest.raises(ValidationError):
        train(corpus, config, params=params)


def test_train_task_mismatch_rejected(corpus):
    config = toy_config()
    vocab = corpus.build_vocabulary(1)
    params = init_model(toy_config(task="retrieval"), vocab, corpus.superclass_names)
    with pytest.raises(ValidationError):
        train(corpus, config, params=params)


def test_manifest_echoes_configured_iterations(corpus):
    config, vocab, params = fresh_model(corpus)
    paper_cfg = TrainConfig(task="caption", iterations=200000)
    ckpt = Checkpoint.capture(params, paper_cfg, iteration=0, history=[])
    assert ckpt.manifest["config"]["iterations"] == 200000


# -- checkpoint round trips ------------------------------------------------------------

def test_checkpoint_round_trip_bitwise(corpus, tmp_path):
    config, vocab, params = fresh_model(corpus)
    velocity = init_velocity(params)
    path = save_checkpoint(params, config, tmp_path / "ckpt.zip", iteration=5,
                           history=[1.0, 0.5], velocity=velocity)
    loaded = load_checkpoint(path)
    model = loaded.to_model()
    for name, t in params.tensors.items():
        np.testing.assert_array_equal(t.data.astype(np.float32), model.tensors[name].data)
    assert loaded.manifest["iteration"] == 5
    assert loaded.velocity() is not None
    assert model.vocab.index_to_word == vocab.index_to_word
    assert model.superclass_names == corpus.superclass_names


def test_checkpoint_truncated_file_is_corruption_error(corpus, tmp_path):
    config, vocab, params = fresh_model(corpus)
    path = save_checkpoint(params, config, tmp_path / "ckpt.zip")
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointCorruptionError):
        load_checkpoint(path)


def test_checkpoint_digest_mismatch_detected(corpus, tmp_path):
    import zipfile

    config, vocab, params = fresh_model(corpus)
    path = save_checkpoint(params, config, tmp_path / "ckpt.zip")
    # flip one tensor blob without touching the manifest
    with zipfile.ZipFile(path) as zf:
        names = zf.namelist()
        contents = {n: zf.read(n) for n in names}
    blob = next(n for n in names if n.startswith("tensors/"))
    corrupted = bytearray(contents[blob])
    corrupted[0] ^= 0xFF
    contents[blob] = bytes(corrupted)
    with zipfile.ZipFile(path, "w") as zf:
        for n, data in contents.items():
            zf.writestr(n, data)
    with pytest.raises(CheckpointCorruptionError, match="digest"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(corpus, tmp_path):
    import json
    import zipfile

    config, vocab, params = fresh_model(corpus)
    path = save_checkpoint(params, config, tmp_path / "ckpt.zip")
    with zipfile.ZipFile(path) as zf:
        contents = {n: zf.read(n) for n in zf.namelist()}
    manifest = json.loads(contents["manifest.json"])
    manifest["format_version"] = 99
    contents["manifest.json"] = json.dumps(manifest).encode()
    with zipfile.ZipFile(path, "w") as zf:
        for n, data in contents.items():
            zf.writestr(n, data)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_checkpoint_task_mismatch(corpus, tmp_path):
    config, vocab, params = fresh_model(corpus)
    path = save_checkpoint(params, config, tmp_path / "ckpt.zip")
    with pytest.raises(CheckpointTaskMismatchError):
        load_checkpoint(path, expected_task="retrieval")
    assert load_checkpoint(path, expected_task="caption").manifest["task"] == "caption"


def test_loaded_model_reproduces_forward_outputs(corpus, tmp_path):
    from got.trainer import training_forward

    config, vocab, params = fresh_model(corpus)
    path = save_checkpoint(params, config, tmp_path / "ckpt.zip")
    model = load_checkpoint(path).to_model()
    a = training_forward(corpus[0], params, config, np.random.default_rng(5))
    b = training_forward(corpus[0], model, config, np.random.default_rng(5))
    assert np.array_equal(a.total.data, b.total.data)
