"""Tape gradients on a small graph computation, checked against finite differences."""

import numpy as np

from ibn import autodiff as ad
from ibn.graph import build_predefined, gaussian_adjacency, pairwise_euclidean

rng = np.random.default_rng(0)
x0 = rng.normal(size=(5, 3))
a_pre = build_predefined(rng.uniform(size=(5, 2)))


def loss_of(xv):
    a_gau = gaussian_adjacency(pairwise_euclidean(xv), gamma=3.0)
    mixed = ad.add(ad.matmul(a_gau, xv), ad.matmul(a_pre, xv))
    return ad.mean(ad.square(ad.layer_norm(mixed)))


x = ad.Var(x0, requires_grad=True)
with ad.Tape() as tape:
    loss = loss_of(x)
g = tape.backward(loss, [x])[x.id]

h = 1e-6
fd = np.zeros_like(x0)
for idx in np.ndindex(*x0.shape):
    up, dn = x0.copy(), x0.copy()
    up[idx] += h
    dn[idx] -= h
    fd[idx] = (loss_of(ad.Var(up)).value - loss_of(ad.Var(dn)).value) / (2 * h)

print("loss", float(loss.value))
print("max |tape - finite difference|", float(np.abs(g - fd).max()))
print("row sums of the predefined graph", a_pre.sum(axis=1).round(12))
print("row sums of the input-driven graph", gaussian_adjacency(pairwise_euclidean(x0), 3.0).value.sum(axis=1).round(12))
