"""Attention-based reconstruction of missing variables and MC-dropout weighting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var

DROPOUT_RATE = 0.1
MC_SAMPLES = 10


class DropoutStream:
    """Counter-based dropout masks keyed by position in the computation.

    ``(seed, pass_id, *key)`` is hashed into a Philox key; Monte Carlo sample
    ``s`` reads the counter block starting at ``s * 2**64``. Masks therefore
    do not depend on the order in which steps or samples are evaluated.
    """

    def __init__(self, seed: int, pass_id: int = 0):
        self.seed = int(seed)
        self.pass_id = int(pass_id)
        self._cache: dict = {}

    def masks(self, key: tuple[int, ...], samples: int, shape: tuple[int, ...], p: float) -> np.ndarray:
        """Binary keep-masks of shape (samples, *shape); repeated keys reuse the draw."""
        if p == 0.0:
            return np.ones((samples, *shape), dtype=bool)
        memo = (tuple(key), samples, tuple(shape), p)
        if memo not in self._cache:
            self._cache[memo] = self._draw(key, samples, shape, p)
        return self._cache[memo]

    def _draw(self, key, samples, shape, p):
        pkey = np.random.SeedSequence([self.seed, self.pass_id, *key]).generate_state(2, np.uint64)
        out = np.empty((samples, *shape), dtype=bool)
        for s in range(samples):
            gen = np.random.Generator(np.random.Philox(key=pkey, counter=[0, s, 0, 0]))
            out[s] = gen.random(shape, dtype=np.float32) >= np.float32(p)
        return out


def mask_moments(masks: np.ndarray, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate mean and population std of the scaled masks k_s = mask_s / (1 - p).

    With K of S samples kept these are K / (S (1 - p)) and
    sqrt(K (S - K)) / (S (1 - p)). Because every sample applies its mask to the same affine output z, the
    sample mean is z * mean and the sample std is |z| * std.
    """
    s = masks.shape[0]
    kept = np.count_nonzero(masks, axis=0).astype(np.float64)
    scale = 1.0 / (s * (1.0 - p))
    return kept * scale, np.sqrt(kept * (s - kept)) * scale


@dataclass
class IAParams:
    node_embed: Var
    proj_w: Var
    proj_b: Var

    def named_parameters(self, prefix: str):
        yield f"{prefix}.node_embed", self.node_embed
        yield f"{prefix}.proj_w", self.proj_w
        yield f"{prefix}.proj_b", self.proj_b


@dataclass
class UAIParams:
    w: Var
    b: Var
    p: float = DROPOUT_RATE
    s: int = MC_SAMPLES

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.p}")
        if self.s < 1:
            raise ValueError(f"need at least one Monte Carlo sample, got {self.s}")

    def named_parameters(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


@dataclass
class UAIOutput:
    mu: Var
    sigma: Var
    x_hat: Var


def interpolation_attention(x_t, mask, params: IAParams) -> Var:
    """Fill missing rows of ``x_t`` (..., N, D) from observed rows.

    Missing row i becomes sum_j alpha_ij x_j over observed j, with
    alpha_i = softmax_j(E_i . E_j / sqrt(d_e)). Observed rows are returned
    unchanged and missing rows are never read.
    """
    x_t = ad.as_var(x_t)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (x_t.shape[-2],):
        raise ad.ShapeError(f"mask of shape {mask.shape} does not match {x_t.shape[-2]} variables")
    observed = np.flatnonzero(mask)
    if observed.size == 0:
        raise ValueError("no observed variables to interpolate from")
    if observed.size == mask.size:
        return x_t
    e = params.node_embed
    scores = ad.matmul(e, ad.transpose(e[observed]))
    alpha = ad.softmax(ad.mul(scores, 1.0 / np.sqrt(e.shape[-1])))
    recon = ad.matmul(alpha, x_t[(..., observed, slice(None))])
    return ad.where(mask[:, None], x_t, recon)


def uncertainty_weight(mu, sigma) -> Var:
    """mu / (1 + sigma): larger spread pulls the estimate toward zero."""
    return ad.div(mu, ad.add(sigma, 1.0))


def uai_forward(x_ia, params: UAIParams, stream: DropoutStream | None = None,
                key: tuple[int, ...] = (), deterministic: bool = False,
                explicit: bool = False) -> UAIOutput:
    """S dropout passes through a shared linear map, reduced to mean and spread.

    The output is mu / (1 + sigma) with the population standard deviation.
    Dropout stays active at evaluation time; ``deterministic`` runs a single
    mask-free pass instead (sigma = 0, x_hat = mu).

    By default the S passes are folded into per-coordinate mask statistics
    (see :func:`mask_moments`); ``explicit=True`` materializes all S samples
    and reduces them, which is slower and serves as a reference.
    """
    x_ia = ad.as_var(x_ia)
    if params.w.shape != (x_ia.shape[-1], x_ia.shape[-1]):
        raise ad.ShapeError(f"UAI weight {params.w.shape} does not match feature width {x_ia.shape[-1]}")
    z = ad.add(ad.matmul(x_ia, params.w), params.b)
    if deterministic:
        return UAIOutput(z, ad.Var(np.zeros(z.shape)), z)
    if stream is None:
        raise ValueError("MC dropout needs a DropoutStream")
    masks = stream.masks(key, params.s, z.shape, params.p)
    if explicit:
        m = ad.dropout(z, masks, params.p)
        # shift by the first sample: identical samples give sigma == 0 exactly
        ref = m[0]
        dev = ad.sub(m, ref)
        dev_mean = ad.mean(dev, axis=0)
        mu = ad.add(ref, dev_mean)
        sigma = ad.sqrt(ad.mean(ad.square(ad.sub(dev, dev_mean)), axis=0))
    else:
        scale, spread = mask_moments(masks, params.p)
        mu = ad.mul(z, scale)
        sigma = ad.mul(ad.absolute(z), spread)
    return UAIOutput(mu, sigma, uncertainty_weight(mu, sigma))
