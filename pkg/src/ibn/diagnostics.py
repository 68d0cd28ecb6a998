"""Error-versus-uncertainty and adjacency exports from the first-layer forward cell."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import autodiff as ad
from .data import MaskedSeries, save_matrix
from .imputation import DropoutStream, uai_forward
from .recurrent import ForecastModel, ibn_forward
from .training import EVAL_SEED


@dataclass
class UncertaintyTable:
    variable: np.ndarray  # (R,) variable index
    window: np.ndarray  # (R,) window index within the split
    reconstruction_error: np.ndarray
    sigma: np.ndarray
    rho: float | None

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variable", "window", "reconstruction_error", "sigma"])
            for v, k, e, s in zip(self.variable, self.window, self.reconstruction_error, self.sigma):
                w.writerow([int(v), int(k), f"{e:.17g}", f"{s:.17g}"])


def spearman(a, b) -> float | None:
    """Rank correlation, or ``None`` when either column is constant."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size < 2 or np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        return None
    return float(spearmanr(a, b).statistic)


def _clean_targets(model: ForecastModel, x_true: np.ndarray) -> np.ndarray:
    """Ground-truth inputs mapped through the layer-1 projection and UAI affine map, per step."""
    cell = model.cells["l1f"]
    out = []
    for t in range(x_true.shape[-2]):
        proj = ad.add(ad.matmul(x_true[..., t, :], cell.ia.proj_w), cell.ia.proj_b)
        out.append(uai_forward(proj, cell.uai, deterministic=True).x_hat.value)
    return np.stack(out)  # (H, W, N, D)


def uncertainty_diagnostics(model: ForecastModel, split: MaskedSeries, seed: int = EVAL_SEED,
                            batch_size: int = 256) -> UncertaintyTable:
    """Per masked variable and window: reconstruction error and mean sigma of layer-1 UAI.

    The error is the mean |x_hat - x_clean| over the window's steps and
    features, where x_clean is the true (unmasked) input pushed through the
    same projection and a dropout-free UAI pass. Both columns live on the
    normalized scale. ``rho`` is their Spearman correlation.
    """
    missing = np.flatnonzero(~np.asarray(split.mask, dtype=bool))
    if missing.size == 0:
        raise ValueError("diagnostics require masked variables")
    if split.x_true is None:
        raise ValueError("diagnostics require ground-truth inputs for the masked variables")
    errs, sigmas = [], []
    for i, lo in enumerate(range(0, len(split), batch_size)):
        sl = slice(lo, lo + batch_size)
        trace: dict = {}
        ibn_forward(split.x_m[sl], split.mask, model, DropoutStream(seed, pass_id=i), training=False, trace=trace)
        steps = trace["l1f"]
        x_hat = np.stack([s["x_hat"] for s in steps])  # (H, B, N, D)
        sigma = np.stack([s["sigma"] for s in steps])
        clean = _clean_targets(model, split.x_true[sl])
        errs.append(np.abs(x_hat - clean).mean(axis=(0, 3)))  # (B, N)
        sigmas.append(sigma.mean(axis=(0, 3)))
    err = np.concatenate(errs)[:, missing]
    sig = np.concatenate(sigmas)[:, missing]
    windows = np.arange(len(split))
    variable = np.repeat(missing[None, :], len(split), axis=0).T.reshape(-1)
    window = np.tile(windows, missing.size)
    e, s = err.T.reshape(-1), sig.T.reshape(-1)
    return UncertaintyTable(variable, window, e, s, spearman(e, s))


def export_adjacency(model: ForecastModel, x_window, mask, seed: int = EVAL_SEED) -> tuple[np.ndarray, np.ndarray]:
    """``(a_pre, a_gau averaged over the steps of one window)`` from the layer-1 forward cell."""
    x_window = np.asarray(x_window, dtype=np.float64)
    if x_window.ndim == 3:
        x_window = x_window[None]
    trace: dict = {}
    ibn_forward(x_window[:1], mask, model, DropoutStream(seed), training=False, trace=trace)
    a_gau = np.mean([s["a_gau"][0] for s in trace["l1f"]], axis=0)
    return model.a_pre.copy(), a_gau


def write_adjacency(outdir, a_pre: np.ndarray, a_gau: np.ndarray):
    outdir = Path(outdir)
    save_matrix(outdir / "adj_pre.csv", a_pre)
    save_matrix(outdir / "adj_gau.csv", a_gau)


def edge_contrast(a: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """Mean off-diagonal weight on pairs connected in ``truth`` and on unconnected pairs."""
    off = ~np.eye(a.shape[0], dtype=bool)
    linked = (truth > 0) & off
    unlinked = (truth == 0) & off
    return float(a[linked].mean()), float(a[unlinked].mean()) if unlinked.any() else float("nan")
