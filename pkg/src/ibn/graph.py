"""Static and feature-driven adjacency matrices and the dual-graph convolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var


@dataclass
class GraphPair:
    """Predefined adjacency plus the dynamic one derived from current features.

    ``a_pre`` is a constant (N, N) array; ``a_gau`` is a differentiable
    (..., N, N) Var recomputed for every cell invocation.
    """

    a_pre: np.ndarray
    a_gau: Var
    gamma: float

    @property
    def n(self) -> int:
        return self.a_pre.shape[0]


@dataclass
class GGCNParams:
    w_pre: Var
    w_gau: Var

    @property
    def tied(self) -> bool:
        return self.w_pre is self.w_gau

    def named_parameters(self, prefix: str):
        yield f"{prefix}.w_pre", self.w_pre
        if not self.tied:
            yield f"{prefix}.w_gau", self.w_gau


def pairwise_euclidean(x) -> Var:
    """Euclidean distances between the rows of ``x`` (..., N, D) -> (..., N, N)."""
    return ad.sqrt(ad.pairwise_sqdist(x))


def gaussian_kernel(dist, gamma: float) -> Var:
    """exp(-d^2 / (2 gamma)), before self-loop and normalization."""
    if not gamma > 0:
        raise ValueError("bandwidth must be positive")
    return ad.exp(ad.mul(ad.square(dist), -1.0 / (2.0 * gamma)))


def gaussian_adjacency(dist, gamma: float) -> Var:
    """Kernel weights, plus identity, then a row softmax."""
    k = gaussian_kernel(dist, gamma)
    n = k.shape[-1]
    return ad.softmax(ad.add(k, np.eye(n)))


def build_predefined(data, threshold: float | None = None) -> np.ndarray:
    """Row-normalized Gaussian-kernel graph from distances or planar coordinates.

    ``data`` is either an (N, N) distance matrix or (N, 2) coordinates; an
    (N, N) input is always read as distances. Pairs farther apart than
    ``threshold`` (default: no cutoff) get no edge. The kernel width is the
    mean off-diagonal distance.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"expected an (N, N) distance matrix or (N, 2) coordinates, got {data.shape}")
    n = data.shape[0]
    if data.shape == (n, n):
        dist = data
    elif data.shape[1] == 2:
        dist = np.sqrt(((data[:, None, :] - data[None, :, :]) ** 2).sum(-1))
    else:
        raise ValueError(f"expected an (N, N) distance matrix or (N, 2) coordinates, got {data.shape}")
    if np.any(dist < 0):
        raise ValueError("distances must be nonnegative")
    if n == 1:
        return np.ones((1, 1))
    off = ~np.eye(n, dtype=bool)
    scale = dist[off].mean()
    w = np.exp(-dist**2 / (2.0 * scale**2)) if scale > 0 else np.ones_like(dist)
    if threshold is not None:
        w = np.where(dist <= threshold, w, 0.0)
    w[~off] = 1.0
    return w / w.sum(axis=1, keepdims=True)


def make_graph_pair(x_hat, a_pre: np.ndarray, adaptive: Var | None = None) -> GraphPair:
    """Build the pair for one cell step; ``adaptive`` replaces the Gaussian graph."""
    x_hat = ad.as_var(x_hat)
    gamma = float(x_hat.shape[-1])
    if adaptive is not None:
        return GraphPair(a_pre, adaptive, gamma)
    return GraphPair(a_pre, gaussian_adjacency(pairwise_euclidean(x_hat), gamma), gamma)


def propagate(x_hat, pair: GraphPair) -> tuple[Var, Var]:
    """Graph products (A_pre x, A_gau x), shareable across several GGCN weight sets."""
    x_hat = ad.as_var(x_hat)
    if pair.a_pre.shape[-1] != x_hat.shape[-2]:
        raise ad.ShapeError(f"adjacency {pair.a_pre.shape} does not match {x_hat.shape[-2]} variables")
    return ad.matmul(pair.a_pre, x_hat), ad.matmul(pair.a_gau, x_hat)


def ggcn_combine(ax_pre: Var, ax_gau: Var, params: GGCNParams) -> Var:
    d_in = ax_pre.shape[-1]
    for w in (params.w_pre, params.w_gau):
        if w.shape != (d_in, d_in):
            raise ad.ShapeError(f"GGCN weight {w.shape} does not match feature width {d_in}")
    return ad.layer_norm(ad.add(ad.matmul(ax_pre, params.w_pre), ad.matmul(ax_gau, params.w_gau)))


def ggcn_apply(x_hat, pair: GraphPair, params: GGCNParams) -> Var:
    """layer_norm((A_pre x) W_pre + (A_gau x) W_gau) over the feature axis."""
    return ggcn_combine(*propagate(x_hat, pair), params)


def adaptive_adjacency(e1, e2) -> Var:
    """softmax(relu(e1 e2^T)) row-wise, the learned-embedding graph."""
    return ad.softmax(ad.relu(ad.matmul(e1, ad.transpose(e2))))
