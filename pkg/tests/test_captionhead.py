"""Caption branch: reduction, both forward modes, loss, greedy decoding."""

import numpy as np
import pytest

import got.autodiff as ad
from got.captionhead import (
    DecodedCaption,
    caption_forward,
    caption_forward_ocn1,
    greedy_decode,
    init_caption_head,
    loss_caption,
    reduce_roi_feature,
    teacher_inputs,
)
from got.config import widths_for_preset
from got.datasets import build_vocabulary, encode_caption, tokenize
from got.errors import ValidationError
from gradcheck import assert_gradients_close

TOY = widths_for_preset("toy")


@pytest.fixture()
def vocab():
    captions = [tokenize(c) for c in ["a red square", "a blue square", "a red circle"]]
    return build_vocabulary(captions, min_count=1)


def head(vocab, mode="OCN2", seed=0, dtype=np.float64, channels=8):
    return init_caption_head(TOY, channels, len(vocab), np.random.default_rng(seed),
                             mode=mode, dtype=dtype)


# -- reduction ------------------------------------------------------------------

def test_reduce_zero_weights_zero_output(vocab):
    tensors = head(vocab)
    for i in (1, 2, 3):
        for part in ("w", "b"):
            t = tensors[f"cap/reduce{i}/{part}"]
            t.data = np.zeros_like(t.data)
    pooled = ad.Tensor(np.random.default_rng(0).normal(size=(2, 7, 7, 8)))
    out = reduce_roi_feature(pooled, tensors)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_reduce_output_dim_matches_preset(vocab):
    tensors = head(vocab)
    pooled = ad.Tensor(np.random.default_rng(1).normal(size=(3, 7, 7, 8)))
    assert reduce_roi_feature(pooled, tensors).shape == (3, TOY.roi_feature_dim)


def test_reduce_paper_preset_is_512(vocab):
    paper = widths_for_preset("paper")
    assert paper.reduce_widths == (4096, 2048, 512)
    assert paper.roi_feature_dim == 512
    assert paper.lstm_hidden == 512


def test_reduce_gradients(vocab):
    tensors = head(vocab, seed=3)
    pooled_data = np.random.default_rng(2).normal(size=(2, 7, 7, 8))
    weights = ad.Tensor(np.random.default_rng(3).normal(size=(2, TOY.roi_feature_dim)))
    reduce_only = {k: v for k, v in tensors.items() if k.startswith("cap/reduce")}

    def loss():
        return (reduce_roi_feature(ad.Tensor(pooled_data), tensors) * weights).sum()

    assert_gradients_close(loss, reduce_only, sample=30)


# -- forward --------------------------------------------------------------------

def encode_batch(captions, vocab, n_steps=6):
    return np.stack([encode_caption(tokenize(c), vocab, n_steps).as_array() for c in captions])


def test_forward_zero_params_uniform(vocab):
    tensors = head(vocab)
    for t in tensors.values():
        t.data = np.zeros_like(t.data)
    visual = ad.Tensor(np.random.default_rng(1).normal(size=(2, TOY.roi_feature_dim)))
    tokens = encode_batch(["a red square", "a blue circle"], vocab)
    probs = caption_forward(visual, tokens, tensors, vocab.eoc_index)
    assert len(probs) == 6
    for p in probs:
        np.testing.assert_allclose(p.data, 1.0 / len(vocab), atol=1e-12)


def test_forward_distributions_sum_to_one(vocab):
    tensors = head(vocab, seed=5)
    visual = ad.Tensor(np.random.default_rng(2).normal(size=(3, TOY.roi_feature_dim)))
    tokens = encode_batch(["a red square", "a blue square", "a red circle"], vocab)
    for p in caption_forward(visual, tokens, tensors, vocab.eoc_index):
        np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-9)


def test_forward_depends_on_visual_at_every_step(vocab):
    # the structural advantage of the two-LSTM head: per-step visual input
    tensors = head(vocab, seed=7)
    rng = np.random.default_rng(3)
    tokens = encode_batch(["a red square"], vocab)
    v1 = ad.Tensor(rng.normal(size=(1, TOY.roi_feature_dim)))
    v2 = ad.Tensor(v1.data + rng.normal(size=v1.shape) * 0.5)
    p1 = caption_forward(v1, tokens, tensors, vocab.eoc_index)
    p2 = caption_forward(v2, tokens, tensors, vocab.eoc_index)
    for a, b in zip(p1, p2):
        assert np.abs(a.data - b.data).max() > 1e-9


def test_word_lstm_input_dimension_is_hidden_plus_vocab(vocab):
    tensors = head(vocab)
    assert tensors["cap/lstm_word/w_xi"].shape[0] == TOY.lstm_hidden + len(vocab)


def test_ocn1_input_dimension_is_visual_plus_vocab(vocab):
    tensors = head(vocab, mode="OCN1")
    assert tensors["cap/lstm_word/w_xi"].shape[0] == TOY.roi_feature_dim + len(vocab)
    assert "cap/lstm_roi/w_xi" not in tensors


def test_ocn1_contract_matches_ocn2_shapes(vocab):
    tensors = head(vocab, mode="OCN1", seed=9)
    visual = ad.Tensor(np.random.default_rng(4).normal(size=(2, TOY.roi_feature_dim)))
    tokens = encode_batch(["a red square", "a blue circle"], vocab)
    probs = caption_forward_ocn1(visual, tokens, tensors, vocab.eoc_index)
    assert len(probs) == 6
    assert all(p.shape == (2, len(vocab)) for p in probs)


def test_ocn1_visual_enters_at_step_one(vocab):
    # definitional: step-1 input carries the visual feature directly
    tensors = head(vocab, mode="OCN1", seed=11)
    rng = np.random.default_rng(12)
    tokens = encode_batch(["a red square"], vocab)
    v1 = ad.Tensor(rng.normal(size=(1, TOY.roi_feature_dim)))
    v2 = ad.Tensor(v1.data + 0.5)
    p1 = caption_forward(v1, tokens, tensors, vocab.eoc_index, mode="OCN1")
    p2 = caption_forward(v2, tokens, tensors, vocab.eoc_index, mode="OCN1")
    assert np.abs(p1[0].data - p2[0].data).max() > 1e-9


def test_teacher_inputs_shift_right_with_begin_token(vocab):
    tokens = encode_batch(["a red square"], vocab)
    shifted = teacher_inputs(tokens, vocab.eoc_index)
    assert shifted[0, 0] == vocab.eoc_index
    np.testing.assert_array_equal(shifted[0, 1:], tokens[0, :-1])


def test_forward_rejects_bad_tokens(vocab):
    tensors = head(vocab)
    visual = ad.Tensor(np.zeros((1, TOY.roi_feature_dim)))
    with pytest.raises(ValidationError):
        caption_forward(visual, np.array([[0, 1, 99, 0, 0, 0]]), tensors, vocab.eoc_index)


# -- loss ------------------------------------------------------------------------

def test_loss_perfect_predictions_zero(vocab):
    targets = encode_batch(["a red square"], vocab)
    probs = []
    for t in range(6):
        row = np.zeros((1, len(vocab)))
        row[0, targets[0, t]] = 1.0
        probs.append(ad.Tensor(row))
    assert float(loss_caption(probs, targets).data) == 0.0


def test_loss_uniform_is_log_vocab_size(vocab):
    targets = encode_batch(["a red square", "a blue circle"], vocab)
    probs = [ad.Tensor(np.full((2, len(vocab)), 1.0 / len(vocab))) for _ in range(6)]
    assert abs(float(loss_caption(probs, targets).data) - np.log(len(vocab))) < 1e-9


def test_loss_uniform_paper_dictionary_size():
    # dictionary of 866 words: uniform loss is ln(866) ~ 6.7638 per word
    targets = np.zeros((1, 6), dtype=np.int64)
    probs = [ad.Tensor(np.full((1, 866), 1.0 / 866)) for _ in range(6)]
    assert abs(float(loss_caption(probs, targets).data) - 6.763885) < 1e-4


def test_loss_decreases_on_tiny_overfit(vocab):
    tensors = head(vocab, seed=13)
    rng = np.random.default_rng(5)
    visual_data = rng.normal(size=(1, TOY.roi_feature_dim))
    targets = encode_batch(["a red square"], vocab)
    losses = []
    lr = 0.5
    for step in range(50):
        for t in tensors.values():
            t.grad = None
        probs = caption_forward(ad.Tensor(visual_data), targets, tensors, vocab.eoc_index)
        loss = loss_caption(probs, targets)
        losses.append(float(loss.data))
        loss.backward()
        for t in tensors.values():
            if t.grad is not None:
                t.data = t.data - lr * t.grad
    assert losses[-1] < losses[0]
    assert all(b <= a + 1e-6 for a, b in zip(losses, losses[1:]))


def test_full_caption_branch_gradient(vocab):
    tensors = head(vocab, seed=17)
    pooled_data = np.random.default_rng(6).normal(size=(2, 7, 7, 8))
    targets = encode_batch(["a red square", "a blue circle"], vocab)

    def loss():
        visual = reduce_roi_feature(ad.Tensor(pooled_data), tensors)
        probs = caption_forward(visual, targets, tensors, vocab.eoc_index)
        return loss_caption(probs, targets)

    assert_gradients_close(loss, tensors, sample=12)


def test_full_ocn1_branch_gradient(vocab):
    tensors = head(vocab, mode="OCN1", seed=19)
    pooled_data = np.random.default_rng(7).normal(size=(2, 7, 7, 8))
    targets = encode_batch(["a red square", "a blue circle"], vocab)

    def loss():
        visual = reduce_roi_feature(ad.Tensor(pooled_data), tensors)
        probs = caption_forward(visual, targets, tensors, vocab.eoc_index, mode="OCN1")
        return loss_caption(probs, targets)

    assert_gradients_close(loss, tensors, sample=12)


# -- decoding --------------------------------------------------------------------

def test_decode_respects_step_cap(vocab):
    tensors = head(vocab, seed=21)
    visual = ad.Tensor(np.random.default_rng(8).normal(size=(1, TOY.roi_feature_dim)))
    decoded = greedy_decode(visual, tensors, vocab, max_steps=6)
    assert len(decoded.token_ids) <= 6
    content = decoded.words(vocab)
    assert len(content) <= 6


def test_decode_eoc_biased_params_give_empty_caption(vocab):
    tensors = head(vocab, seed=23)
    tensors["cap/proj/b"].data = np.zeros(len(vocab))
    tensors["cap/proj/b"].data[vocab.eoc_index] = 50.0
    visual = ad.Tensor(np.random.default_rng(9).normal(size=(1, TOY.roi_feature_dim)))
    decoded = greedy_decode(visual, tensors, vocab, max_steps=6)
    assert decoded.words(vocab) == []
    assert decoded.token_ids == (vocab.eoc_index,)


def test_decode_deterministic(vocab):
    tensors = head(vocab, seed=25)
    visual = ad.Tensor(np.random.default_rng(10).normal(size=(1, TOY.roi_feature_dim)))
    a = greedy_decode(visual, tensors, vocab)
    b = greedy_decode(visual, tensors, vocab)
    assert a.token_ids == b.token_ids


def test_decode_no_tokens_after_eoc(vocab):
    tensors = head(vocab, seed=27)
    for trial in range(5):
        visual = ad.Tensor(np.random.default_rng(trial).normal(size=(1, TOY.roi_feature_dim)))
        decoded = greedy_decode(visual, tensors, vocab)
        ids = decoded.token_ids
        if vocab.eoc_index in ids:
            assert ids.index(vocab.eoc_index) == len(ids) - 1


def test_decode_reproduces_caption_after_teacher_forced_overfit(vocab):
    """Greedy decode replays teacher forcing once the single sample is learned."""
    tensors = head(vocab, seed=29)
    visual_data = np.random.default_rng(11).normal(size=(1, TOY.roi_feature_dim))
    caption = "a red square"
    targets = encode_batch([caption], vocab)
    lr = 0.5
    for step in range(300):
        for t in tensors.values():
            t.grad = None
        probs = caption_forward(ad.Tensor(visual_data), targets, tensors, vocab.eoc_index)
        loss = loss_caption(probs, targets)
        loss.backward()
        for t in tensors.values():
            if t.grad is not None:
                t.data = t.data - lr * t.grad
    decoded = greedy_decode(ad.Tensor(visual_data), tensors, vocab, max_steps=6)
    assert decoded.words(vocab) == tokenize(caption)
