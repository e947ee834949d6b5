"""The autodiff engine on its own: a gradient check and a tiny fit."""

import numpy as np

from sslcd import tensor as T
from sslcd.gradcheck import check_gradients
from sslcd.optim import Adam
from sslcd.tensor import Tensor

rng = np.random.default_rng(0)

# %% Central differences against backprop for a conv + ReLU + pooling stack
def net(x, w):
    return T.global_avg_pool(T.relu(T.conv2d(x, w, Tensor(np.zeros(w.shape[0])))))

with T.precision(np.float64):
    err = check_gradients(net, [rng.standard_normal((2, 6, 6)), rng.standard_normal((3, 2, 3, 3))], rng, h=1e-5)
print(f"worst relative gradient error: {err:.2e}")

# %% Fit y = 2x - 1 with Adam
x = rng.standard_normal((64, 1))
y = 2 * x[:, 0] - 1
w, b = Tensor(np.zeros((1, 1)), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)
opt = Adam([w, b], lr=0.05, weight_decay=0.0)
for step in range(300):
    pred = T.linear(Tensor(x), w, b).reshape((64,))
    loss = T.mean((pred - Tensor(y)) ** 2)
    opt.zero_grad()
    loss.backward()
    opt.step()
print(f"w = {w.data.item():.3f}, b = {b.data.item():.3f}, loss = {loss.item():.2e}")
