"""
Reverse-mode autodiff on numpy arrays
=====================================

The model is built on a small tensor type that records operations and
replays them backwards. This script differentiates a tiny network, checks
the result against central finite differences, takes a few AdamW steps and
prints the warm-up cosine learning-rate schedule.
"""

import numpy as np

from ebgame import numerics as nx
from ebgame.numerics import AdamWState, LrSchedule, Tensor

rng = np.random.default_rng(0)

# a two-layer perceptron with layer norm and GELU
W1 = Tensor(rng.standard_normal((3, 8)) * 0.5, requires_grad=True)
W2 = Tensor(rng.standard_normal((8, 1)) * 0.5, requires_grad=True)
g, b = Tensor(np.ones(8), requires_grad=True), Tensor(np.zeros(8), requires_grad=True)
x = rng.standard_normal((16, 3))
y = np.sin(x.sum(axis=1, keepdims=True))


def loss_fn():
    h = nx.gelu(nx.layer_norm(nx.matmul(Tensor(x), W1), g, b))
    err = nx.matmul(h, W2) - y
    return nx.mean(err * err)


loss = loss_fn()
loss.backward()
print("loss", loss.item())

# %%
# Compare the analytic gradient of W1 with central differences.

eps = 1e-5
numeric = np.zeros_like(W1.data)
for idx in np.ndindex(W1.shape):
    old = W1.data[idx]
    W1.data[idx] = old + eps
    up = loss_fn().item()
    W1.data[idx] = old - eps
    down = loss_fn().item()
    W1.data[idx] = old
    numeric[idx] = (up - down) / (2 * eps)
print("max |analytic - numeric| =", np.abs(W1.grad - numeric).max())

# %%
# A few AdamW steps drive the loss down.

params = {"W1": W1, "W2": W2, "g": g, "b": b}
state = AdamWState(lr_base=1e-2, weight_decay=0.0)
for step in range(200):
    nx.zero_grads(params.values())
    loss = loss_fn()
    loss.backward()
    nx.adamw_step(params, state)
print("loss after 200 AdamW steps", loss.item())

# %%
# The schedule ramps linearly to the base rate, then follows half a cosine.

sched = LrSchedule(base_lr=1e-3, warmup_steps=10, total_steps=50)
for step in (0, 5, 10, 30, 50):
    print(f"step {step:2d}  lr {sched(step):.6f}")
