"""
Gradients with the tape
=======================

A tiny logistic regression trained with the numpy autodiff engine and Adam.
"""

import numpy as np

from graphvae import autodiff as ad
from graphvae.autodiff import Adam, Tensor

############################################################
# Two noisy blobs in the plane

rng = np.random.default_rng(0)
X = np.concatenate([rng.normal(-1, 0.7, (100, 2)), rng.normal(1, 0.7, (100, 2))])
y = np.concatenate([np.zeros(100), np.ones(100)])[:, None]

############################################################
# Parameters are tensors that ask for gradients

w = Tensor(np.zeros((2, 1)), requires_grad=True)
b = Tensor(0.0, requires_grad=True)
opt = Adam([w, b], lr=0.05)

for step in range(200):
    p = ad.sigmoid(Tensor(X) @ w + b)
    loss = -(y * ad.log(p) + (1 - y) * ad.log(1 - p)).mean()
    opt.zero_grad()
    loss.backward()
    opt.step()
    if step % 50 == 0:
        print(f"step {step:3d}  loss {loss.item():.4f}")

############################################################
# The decision boundary should run roughly along x + y = 0

print("weights", w.data.ravel(), "bias", b.data)
print("train accuracy", np.mean((ad.sigmoid(Tensor(X) @ w + b).data > 0.5) == y))
