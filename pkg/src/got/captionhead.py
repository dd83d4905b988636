"""Second branch for captioning: RoI feature reduction, the visual LSTM, the
word LSTM fed with per-step concatenations, the caption loss, and greedy
decoding. Supports two modes:

* ``OCN2`` (default): a visual LSTM unrolls over clones of the reduced RoI
  feature; at step t the word LSTM consumes visual_hidden_t (+) one_hot(word).
* ``OCN1`` (baseline): a single LSTM sees the visual vector only at step 1,
  concatenated with the first word; later steps get a zero visual slot.

Teacher forcing uses the end-of-caption id as the begin token: the word fed
at step t is the target of step t-1 (EOC at t=1), so greedy decoding - which
starts from EOC and feeds the argmax back in - replays the training
conditions exactly. The caption loss is the mean negative log-likelihood of
the target words; a printed sum of raw probabilities is not minimizable, so
the standard NLL form is used and documented here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import ModelWidths
from .datasets import Vocabulary
from .detectnet import init_linear
from .errors import ValidationError
from .seqcore import (
    LSTMParams,
    init_lstm_params,
    lstm_step,
    lstm_unroll,
    one_hot_rows,
    predict_word,
    zero_state,
)

MODES = ("OCN1", "OCN2")


def init_caption_head(
    widths: ModelWidths,
    pooled_channels: int,
    vocab_size: int,
    rng: np.random.Generator,
    mode: str = "OCN2",
    dtype=np.float32,
) -> dict[str, ad.Tensor]:
    """Reduction FCs, the LSTM stack for `mode`, and the word projection."""
    if mode not in MODES:
        raise ValidationError(f"unknown caption mode {mode!r}")
    tensors: dict[str, ad.Tensor] = {}
    dims = [widths.pooled_size * widths.pooled_size * pooled_channels, *widths.reduce_widths]
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        tensors[f"cap/reduce{i}/w"], tensors[f"cap/reduce{i}/b"] = init_linear(rng, n_in, n_out, dtype)
    visual_dim = widths.roi_feature_dim
    hidden = widths.lstm_hidden
    if mode == "OCN2":
        roi_lstm = init_lstm_params(visual_dim, hidden, rng, dtype)
        tensors.update(roi_lstm.tensors("cap/lstm_roi"))
        word_lstm = init_lstm_params(hidden + vocab_size, hidden, rng, dtype)
        tensors.update(word_lstm.tensors("cap/lstm_word"))
    else:
        word_lstm = init_lstm_params(visual_dim + vocab_size, hidden, rng, dtype)
        tensors.update(word_lstm.tensors("cap/lstm_word"))
    tensors["cap/proj/w"], tensors["cap/proj/b"] = init_linear(rng, hidden, vocab_size, dtype)
    return tensors


def _lstm_from(tensors: dict[str, ad.Tensor], prefix: str) -> LSTMParams:
    return LSTMParams(**{name: tensors[f"{prefix}/{name}"] for name in (
        "w_xi", "w_hi", "w_xf", "w_hf", "w_xo", "w_ho", "w_xg", "w_hg",
        "b_i", "b_f", "b_o", "b_g")})


def reduce_roi_feature(pooled: ad.Tensor, tensors: dict[str, ad.Tensor]) -> ad.Tensor:
    """Pooled RoI batch (n, P, P, C) -> (n, roi_feature_dim) through the three
    reduction layers."""
    if pooled.ndim != 4:
        raise ValidationError(f"reduce_roi_feature expects (n, P, P, C), got {pooled.shape}")
    x = ad.reshape(pooled, (pooled.shape[0], -1))
    if x.shape[1] != tensors["cap/reduce1/w"].shape[0]:
        raise ValidationError(
            f"pooled dim {x.shape[1]} does not match reduction input {tensors['cap/reduce1/w'].shape[0]}")
    for i in (1, 2, 3):
        x = ad.relu(x @ tensors[f"cap/reduce{i}/w"] + tensors[f"cap/reduce{i}/b"])
    return x


def teacher_inputs(tokens: np.ndarray, eoc_index: int) -> np.ndarray:
    """Shift targets right and prepend the begin token (the EOC id)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    shifted = np.empty_like(tokens)
    shifted[:, 0] = eoc_index
    shifted[:, 1:] = tokens[:, :-1]
    return shifted


def caption_forward(
    visual: ad.Tensor,
    tokens: np.ndarray,
    tensors: dict[str, ad.Tensor],
    eoc_index: int,
    mode: str = "OCN2",
) -> list[ad.Tensor]:
    """Per-step word distributions (each (n, |D|)) for a batch of RoIs.

    `visual` is the reduced RoI feature (n, d); `tokens` the (n, n_steps)
    target ids. Step t's word input is the previous target (begin token at
    t=1).
    """
    if mode not in MODES:
        raise ValidationError(f"unknown caption mode {mode!r}")
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or visual.ndim != 2 or tokens.shape[0] != visual.shape[0]:
        raise ValidationError(f"caption_forward shapes disagree: visual {visual.shape}, tokens {tokens.shape}")
    n, n_steps = tokens.shape
    vocab_size = tensors["cap/proj/w"].shape[1]
    if tokens.min() < 0 or tokens.max() >= vocab_size:
        raise ValidationError("token id out of vocabulary range")
    dtype = visual.dtype
    inputs = teacher_inputs(tokens, eoc_index)
    word_lstm = _lstm_from(tensors, "cap/lstm_word")
    probs: list[ad.Tensor] = []
    if mode == "OCN2":
        roi_lstm = _lstm_from(tensors, "cap/lstm_roi")
        roi_states = lstm_unroll([visual] * n_steps, roi_lstm)
        state = zero_state(n, word_lstm.hidden_dim, dtype)
        for t in range(n_steps):
            onehot = ad.Tensor(one_hot_rows(inputs[:, t], vocab_size, dtype))
            x = ad.concat([roi_states[t].h, onehot], axis=1)
            state = lstm_step(x, state, word_lstm)
            probs.append(predict_word(state.h, tensors["cap/proj/w"], tensors["cap/proj/b"]))
    else:
        zero_visual = ad.Tensor(np.zeros_like(visual.data))
        state = zero_state(n, word_lstm.hidden_dim, dtype)
        for t in range(n_steps):
            onehot = ad.Tensor(one_hot_rows(inputs[:, t], vocab_size, dtype))
            x = ad.concat([visual if t == 0 else zero_visual, onehot], axis=1)
            state = lstm_step(x, state, word_lstm)
            probs.append(predict_word(state.h, tensors["cap/proj/w"], tensors["cap/proj/b"]))
    return probs


def caption_forward_ocn1(visual, tokens, tensors, eoc_index) -> list[ad.Tensor]:
    """Single-LSTM baseline: visual feature enters only at the first step."""
    return caption_forward(visual, tokens, tensors, eoc_index, mode="OCN1")


def loss_caption(step_probs: list[ad.Tensor], targets: np.ndarray) -> ad.Tensor:
    """Mean over RoIs and steps of -log P(target word); zero iff every target
    has probability one."""
    targets = np.asarray(targets, dtype=np.int64)
    n, n_steps = targets.shape
    if len(step_probs) != n_steps:
        raise ValidationError(f"{len(step_probs)} step distributions for {n_steps} target columns")
    rows = np.arange(n)
    total = None
    for t, probs in enumerate(step_probs):
        nll = -ad.log(ad.take(probs, rows, targets[:, t])).sum()
        total = nll if total is None else total + nll
    return total * (1.0 / (n * n_steps))


@dataclass(frozen=True)
class DecodedCaption:
    """Greedy decode result: ids end at the first end-of-caption token (kept,
    when it fired within the step budget)."""

    token_ids: tuple[int, ...]
    step_probabilities: tuple[np.ndarray, ...]

    def words(self, vocab: Vocabulary) -> list[str]:
        from .datasets import decode_caption

        return decode_caption(self.token_ids, vocab)


def greedy_decode(
    visual: ad.Tensor,
    tensors: dict[str, ad.Tensor],
    vocab: Vocabulary,
    max_steps: int = 6,
    mode: str = "OCN2",
) -> DecodedCaption:
    """Feed the argmax word back in, starting from the begin token, until the
    end-of-caption token or the step cap; deterministic."""
    if mode not in MODES:
        raise ValidationError(f"unknown caption mode {mode!r}")
    if visual.ndim == 1:
        visual = ad.reshape(visual, (1, visual.shape[0]))
    vocab_size = tensors["cap/proj/w"].shape[1]
    dtype = visual.dtype
    word_lstm = _lstm_from(tensors, "cap/lstm_word")
    roi_lstm = roi_state = None
    if mode == "OCN2":
        roi_lstm = _lstm_from(tensors, "cap/lstm_roi")
        roi_state = zero_state(1, roi_lstm.hidden_dim, dtype)
    state = zero_state(1, word_lstm.hidden_dim, dtype)
    zero_visual = ad.Tensor(np.zeros_like(visual.data))
    current = vocab.eoc_index
    ids: list[int] = []
    probs: list[np.ndarray] = []
    for t in range(max_steps):
        onehot = ad.Tensor(one_hot_rows([current], vocab_size, dtype))
        if mode == "OCN2":
            roi_state = lstm_step(visual, roi_state, roi_lstm)
            x = ad.concat([roi_state.h, onehot], axis=1)
        else:
            x = ad.concat([visual if t == 0 else zero_visual, onehot], axis=1)
        state = lstm_step(x, state, word_lstm)
        dist = predict_word(state.h, tensors["cap/proj/w"], tensors["cap/proj/b"])
        probs.append(dist.data[0].copy())
        current = int(np.argmax(dist.data[0]))
        ids.append(current)
        if current == vocab.eoc_index:
            break
    return DecodedCaption(tuple(ids), tuple(probs))
