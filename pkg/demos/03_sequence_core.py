"""The LSTM cell and word predictor, with a live finite-difference check.

Run: python3 demos/03_sequence_core.py
"""

import numpy as np

import got.autodiff as ad
from got.seqcore import init_lstm_params, lstm_step, lstm_unroll, one_hot, predict_word, zero_state

rng = np.random.default_rng(0)

print("== one-hot embedding ==")
print("one_hot(2, 6) =", one_hot(2, 6).astype(int))

print("\n== gate behavior ==")
params = init_lstm_params(4, 5, rng, dtype=np.float64)
for t in params.tensors("p").values():
    t.data = np.zeros_like(t.data)
state = lstm_step(ad.Tensor(np.ones((1, 4))), zero_state(1, 5, np.float64), params)
print("zero parameters: gates sit at sigmoid(0)=0.5, candidate at tanh(0)=0,")
print("so h' and c' are exactly zero:", state.h.data[0], state.c.data[0])

params.b_f.data = np.full(5, 10.0)  # saturate the forget gate
carried = lstm_step(ad.Tensor(np.zeros((1, 4))),
                    type(state)(ad.Tensor(np.zeros((1, 5))), ad.Tensor(np.ones((1, 5)))), params)
print("saturated forget gate preserves the memory cell:", np.round(carried.c.data[0], 4))

print("\n== unrolling ==")
params = init_lstm_params(3, 4, rng, dtype=np.float64)
xs = [ad.Tensor(rng.normal(size=(1, 3))) for _ in range(5)]
states = lstm_unroll(xs, params)
print("h stays inside (-1, 1) at every step:",
      [float(np.abs(s.h.data).max()) < 1 for s in states])
whole = lstm_unroll(xs, params)[-1]
resumed = lstm_unroll(xs[2:], params, initial=lstm_unroll(xs[:2], params)[-1])[-1]
print("split-and-resume equals one pass:", np.allclose(whole.h.data, resumed.h.data))

print("\n== word prediction ==")
z = ad.Tensor(rng.normal(size=(1, 4)))
w_z = ad.Tensor(np.zeros((4, 866)))
b_z = ad.Tensor(np.zeros(866))
probs = predict_word(z, w_z, b_z)
print(f"zero weights over an 866-word dictionary -> uniform {probs.data[0, 0]:.6f} = 1/866")

print("\n== gradient check (central finite differences, float64) ==")
params = init_lstm_params(3, 4, rng, dtype=np.float64)
x = ad.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
mix = ad.Tensor(rng.normal(size=(2, 4)))

def loss_value():
    return (lstm_step(x, zero_state(2, 4, np.float64), params).h * mix).sum()

loss = loss_value()
loss.backward()
analytic = params.w_xi.grad.copy()
eps = 1e-5
numeric = np.zeros_like(analytic)
flat, nflat = params.w_xi.data.reshape(-1), numeric.reshape(-1)
for i in range(flat.size):
    orig = flat[i]
    flat[i] = orig + eps
    up = float(loss_value().data)
    flat[i] = orig - eps
    down = float(loss_value().data)
    flat[i] = orig
    nflat[i] = (up - down) / (2 * eps)
rel = np.linalg.norm(analytic - numeric) / (np.linalg.norm(analytic) + np.linalg.norm(numeric))
print(f"relative error on the input-gate weights: {rel:.2e} (tolerance 1e-4)")
