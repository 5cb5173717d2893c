"""
A tiny reverse-mode tape
========================

Build a two-layer network out of pqvae.tensorcore ops, check one gradient
against finite differences, then fit it with AdamW.
"""

import numpy as np

from pqvae.tensorcore import AdamW, AdamWHyper, Tensor, affine, backward, elu, mean, square

rng = np.random.default_rng(0)

# toy regression target: y = sin(3x)
x = rng.uniform(-1, 1, (128, 1))
y = np.sin(3 * x)

W1 = Tensor(rng.uniform(-1, 1, (1, 32)), requires_grad=True)
b1 = Tensor(np.zeros(32), requires_grad=True)
W2 = Tensor(rng.uniform(-0.2, 0.2, (32, 1)), requires_grad=True)
b2 = Tensor(np.zeros(1), requires_grad=True)
params = [W1, b1, W2, b2]


def loss_fn():
    h = elu(affine(Tensor(x), W1, b1))
    return mean(square(affine(h, W2, b2) - Tensor(y)))


# One analytic gradient entry vs a central difference.
loss = loss_fn()
backward(loss)
h = 1e-6
W1.data[0, 3] += h
up = loss_fn().item()
W1.data[0, 3] -= 2 * h
down = loss_fn().item()
W1.data[0, 3] += h
print("dL/dW1[0,3] analytic %.8f  numeric %.8f" % (W1.grad[0, 3], (up - down) / (2 * h)))

opt = AdamW(params, AdamWHyper(lr=1e-2))
for step in range(1, 1501):
    opt.zero_grad()
    loss = loss_fn()
    backward(loss)
    opt.step()
    if step % 300 == 0:
        print("step", step, "mse", round(loss.item(), 5))
