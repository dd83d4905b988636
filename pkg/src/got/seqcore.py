"""Sequence primitives: the LSTM cell, sequence unrolling, one-hot word
embedding, and the linear-projection word predictor.

The cell computes, per step, with sigmoid gates and tanh squashing::

    i = sigmoid(x W_xi + h W_hi + b_i)      input gate
    f = sigmoid(x W_xf + h W_hf + b_f)      forget gate
    o = sigmoid(x W_xo + h W_ho + b_o)      output gate
    g = tanh   (x W_xg + h W_hg + b_g)      candidate memory
    c' = f * c + i * g
    h' = o * tanh(c')

All functions take and return autodiff Tensors, are pure given their
parameters, and run batched over the leading axis.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .errors import ValidationError

INIT_RANGE = 0.08  # uniform init half-width
FORGET_BIAS = 1.0  # helps short-sequence memorization


@dataclass
class LSTMParams:
    """Gate weights (input_dim x hidden, hidden x hidden) and biases."""

    w_xi: ad.Tensor
    w_hi: ad.Tensor
    w_xf: ad.Tensor
    w_hf: ad.Tensor
    w_xo: ad.Tensor
    w_ho: ad.Tensor
    w_xg: ad.Tensor
    w_hg: ad.Tensor
    b_i: ad.Tensor
    b_f: ad.Tensor
    b_o: ad.Tensor
    b_g: ad.Tensor

    @property
    def input_dim(self) -> int:
        return self.w_xi.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w_xi.shape[1]

    def validate(self) -> None:
        d, h = self.input_dim, self.hidden_dim
        for f in fields(self):
            t = getattr(self, f.name)
            expected = (d, h) if f.name.startswith("w_x") else (h, h) if f.name.startswith("w_h") else (h,)
            if t.shape != expected:
                raise ValidationError(f"LSTM tensor {f.name} has shape {t.shape}, expected {expected}")
            if not np.all(np.isfinite(t.data)):
                raise ValidationError(f"LSTM tensor {f.name} contains non-finite values")

    def tensors(self, prefix: str) -> dict[str, ad.Tensor]:
        return {f"{prefix}/{f.name}": getattr(self, f.name) for f in fields(self)}


def init_lstm_params(input_dim: int, hidden_dim: int, rng: np.random.Generator,
                     dtype=np.float32, init_range: float = INIT_RANGE) -> LSTMParams:
    """Seeded uniform init in [-init_range, init_range]; forget-gate bias
    starts at +1. The default range suits generation; encoders whose outputs
    must separate short token sequences need a wider one (see retrievalhead).
    """

    def weight(shape):
        return ad.parameter(rng.uniform(-init_range, init_range, size=shape).astype(dtype))

    params = LSTMParams(
        w_xi=weight((input_dim, hidden_dim)), w_hi=weight((hidden_dim, hidden_dim)),
        w_xf=weight((input_dim, hidden_dim)), w_hf=weight((hidden_dim, hidden_dim)),
        w_xo=weight((input_dim, hidden_dim)), w_ho=weight((hidden_dim, hidden_dim)),
        w_xg=weight((input_dim, hidden_dim)), w_hg=weight((hidden_dim, hidden_dim)),
        b_i=ad.parameter(np.zeros(hidden_dim, dtype=dtype)),
        b_f=ad.parameter(np.full(hidden_dim, FORGET_BIAS, dtype=dtype)),
        b_o=ad.parameter(np.zeros(hidden_dim, dtype=dtype)),
        b_g=ad.parameter(np.zeros(hidden_dim, dtype=dtype)),
    )
    return params


@dataclass
class LSTMState:
    """Hidden vector and memory cell, shape (batch, hidden)."""

    h: ad.Tensor
    c: ad.Tensor


def zero_state(batch: int, hidden_dim: int, dtype=np.float32) -> LSTMState:
    return LSTMState(ad.Tensor(np.zeros((batch, hidden_dim), dtype=dtype)),
                     ad.Tensor(np.zeros((batch, hidden_dim), dtype=dtype)))


def one_hot(index: int, size: int, dtype=np.float32) -> np.ndarray:
    """Binary vector with a single 1 at `index`."""
    if not 0 <= index < size:
        raise ValidationError(f"one_hot index {index} out of range for size {size}")
    v = np.zeros(size, dtype=dtype)
    v[index] = 1.0
    return v


def one_hot_rows(indices, size: int, dtype=np.float32) -> np.ndarray:
    """(n, size) matrix whose rows are one-hot vectors."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ValidationError(f"one_hot index out of range for size {size}")
    out = np.zeros((idx.size, size), dtype=dtype)
    out[np.arange(idx.size), idx] = 1.0
    return out


def lstm_step(x: ad.Tensor, state: LSTMState, params: LSTMParams) -> LSTMState:
    """One cell update; `x` is (batch, input_dim)."""
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValidationError(f"lstm_step input shape {x.shape} does not match input_dim {params.input_dim}")
    if state.h.shape != (x.shape[0], params.hidden_dim):
        raise ValidationError(f"lstm_step state shape {state.h.shape} inconsistent with input batch {x.shape[0]}")
    h, c = state.h, state.c
    i = ad.sigmoid(x @ params.w_xi + h @ params.w_hi + params.b_i)
    f = ad.sigmoid(x @ params.w_xf + h @ params.w_hf + params.b_f)
    o = ad.sigmoid(x @ params.w_xo + h @ params.w_ho + params.b_o)
    g = ad.tanh(x @ params.w_xg + h @ params.w_hg + params.b_g)
    c_next = f * c + i * g
    h_next = o * ad.tanh(c_next)
    return LSTMState(h_next, c_next)


def lstm_unroll(inputs, params: LSTMParams, initial: LSTMState | None = None) -> list[LSTMState]:
    """Thread the state through `lstm_step` over a sequence of (batch, d)
    tensors, starting from zeros; returns every per-step state."""
    if len(inputs) == 0:
        raise ValidationError("lstm_unroll needs a non-empty input sequence")
    batch = inputs[0].shape[0]
    state = initial if initial is not None else zero_state(batch, params.hidden_dim, dtype=params.w_xi.dtype)
    states: list[LSTMState] = []
    for x in inputs:
        state = lstm_step(x if isinstance(x, ad.Tensor) else ad.Tensor(x), state, params)
        states.append(state)
    return states


def predict_word(z: ad.Tensor, w_z: ad.Tensor, b_z: ad.Tensor) -> ad.Tensor:
    """Word distribution softmax(z W_z + b_z); rows sum to 1."""
    if z.ndim != 2 or z.shape[1] != w_z.shape[0]:
        raise ValidationError(f"predict_word shape mismatch: z {z.shape} vs W {w_z.shape}")
    return ad.softmax(z @ w_z + b_z)
