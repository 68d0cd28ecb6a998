"""Series ingestion, scaling, variable masking, windowing and a synthetic generator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import build_predefined

SPLITS = (0.7, 0.1, 0.2)


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SeriesSet:
    values: np.ndarray  # (T, N)
    ids: tuple[str, ...]
    period: float | None = None
    coords: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DataFormatError(f"series must be (T, N), got shape {v.shape}")
        bad = np.flatnonzero(~np.isfinite(v).all(axis=1))
        if bad.size:
            raise DataFormatError(f"non-finite values in rows {bad[:10].tolist()}")
        if len(self.ids) != v.shape[1]:
            raise DataFormatError(f"{len(self.ids)} ids for {v.shape[1]} variables")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "ids", tuple(self.ids))

    @property
    def t(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x, axis: int = -1):
        return (x - _along(self.mean, x, axis)) / _along(self.std, x, axis)

    def inverse(self, x, axis: int = -1):
        return x * _along(self.std, x, axis) + _along(self.mean, x, axis)


def _along(v, x, axis):
    shape = [1] * np.ndim(x)
    shape[axis] = -1
    return np.reshape(v, shape)


@dataclass
class MaskedSeries:
    """Windowed split ready for the model.

    ``x_m`` is (W, N, H, C) with masked variables zero-filled; ``y`` is (W, N, L)
    on the normalized scale and never masked. ``x_true`` keeps the unmasked
    inputs for diagnostics only.
    """

    x_m: np.ndarray
    mask: np.ndarray
    y: np.ndarray
    scaler: Scaler
    x_true: np.ndarray = field(repr=False, default=None)
    start: np.ndarray = field(repr=False, default=None)

    def __len__(self):
        return self.x_m.shape[0]


def draw_variable_mask(n: int, rate: float, seed: int) -> np.ndarray:
    """Boolean keep-mask with exactly floor(rate * n) variables dropped."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"missing rate must lie in [0, 1), got {rate}")
    k = math.floor(rate * n)
    if k >= n:
        raise ValueError(f"rate {rate} would mask all {n} variables")
    mask = np.ones(n, dtype=bool)
    mask[np.random.default_rng(seed).choice(n, size=k, replace=False)] = False
    return mask


def apply_variable_mask(values, rate: float, seed: int, axis: int = -1):
    """Zero-fill a random set of whole variables; returns ``(masked, mask)``."""
    values = np.asarray(values, dtype=np.float64)
    mask = draw_variable_mask(values.shape[axis], rate, seed)
    return values * _along(mask, values, axis), mask


def zscore_fit_apply(train, *others):
    """Scale (T, N) splits with per-variable training statistics.

    Returns ``(scaled_train, *scaled_others, scaler)``. Zero-variance variables
    keep a unit divisor.
    """
    train = np.asarray(train, dtype=np.float64)
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    scaler = Scaler(mean, std)
    return (scaler.apply(train), *(scaler.apply(np.asarray(o, dtype=np.float64)) for o in others), scaler)


def window_dataset(values, h: int, l: int, stride: int = 1):
    """Sliding windows over a (T, N) array.

    Returns ``(x, y, start)`` with x (W, N, H, 1), y (W, N, L) and the start
    index of each window.
    """
    values = np.asarray(values, dtype=np.float64)
    t = values.shape[0]
    if t < h + l:
        raise ValueError(f"series of length {t} is too short for history {h} + horizon {l}")
    start = np.arange(0, t - h - l + 1, stride)
    idx = start[:, None] + np.arange(h + l)[None, :]
    win = values[idx]  # (W, H+L, N)
    x = np.transpose(win[:, :h, :], (0, 2, 1))[..., None]
    y = np.transpose(win[:, h:, :], (0, 2, 1))
    return x, y, start


def split_bounds(t: int, ratios=SPLITS) -> list[tuple[int, int]]:
    # round first so that 0.7 + 0.1 does not land just below 0.8
    cuts = np.floor(np.round(np.cumsum(ratios) * t, 9)).astype(int)
    cuts[-1] = t
    lo = np.concatenate([[0], cuts[:-1]])
    return list(zip(lo.tolist(), cuts.tolist()))


def prepare_dataset(series: SeriesSet, h: int, l: int, rate: float, seed: int,
                    ratios=SPLITS, stride: int = 1) -> dict[str, MaskedSeries]:
    """Chronological split, z-score on train, window each split, then mask."""
    bounds = split_bounds(series.t, ratios)
    parts = [series.values[a:b] for a, b in bounds]
    *scaled, scaler = zscore_fit_apply(*parts)
    mask = draw_variable_mask(series.n, rate, seed)
    out = {}
    for name, (a, _), part in zip(("train", "val", "test"), bounds, scaled):
        x, y, start = window_dataset(part, h, l, stride)
        x_m = x * mask[None, :, None, None]
        out[name] = MaskedSeries(x_m, mask.copy(), y, scaler, x_true=x, start=start + a)
    return out


def generate_synthetic(n: int = 12, t: int = 2000, seed: int = 0, alpha: float = 0.5, beta: float = 0.5,
                       period: float = 24.0, noise_std: float = 0.1):
    """Graph-diffusion series with a known spatial structure.

    x_{t+1} = (1 - alpha) x_t + alpha A x_t + beta sin(2 pi t / period + phi) + eps_t
    on a row-normalized geometric graph A over nodes in the unit square
    (Gaussian kernel, edges up to the median distance). Returns
    ``(SeriesSet, A)``.
    """
    if n < 2:
        raise ValueError("need at least two nodes")
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0.0, 1.0, size=(n, 2))
    dist = np.sqrt(((coords[:, None] - coords[None]) ** 2).sum(-1))
    threshold = float(np.median(dist[~np.eye(n, dtype=bool)]))
    adj = build_predefined(dist, threshold)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n)
    x = np.empty((t, n))
    x[0] = rng.standard_normal(n)
    noise = rng.standard_normal((t, n)) * noise_std
    for k in range(t - 1):
        x[k + 1] = ((1.0 - alpha) * x[k] + alpha * (adj @ x[k])
                    + beta * np.sin(2.0 * np.pi * k / period + phase) + noise[k])
    ids = tuple(f"v{i}" for i in range(n))
    return SeriesSet(x, ids, period=period, coords=coords), adj


# -- file formats -------------------------------------------------------------

def _fmt(v: float) -> str:
    return f"{float(v):.17g}"


def _parse_rows(path: Path, rows, width: int | None, first_line: int):
    out = []
    for lineno, row in enumerate(rows, start=first_line):
        if not row or all(not c.strip() for c in row):
            continue
        if width is not None and len(row) != width:
            raise DataFormatError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        try:
            out.append([float(c) for c in row])
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: non-numeric cell in {row!r}") from None
        width = len(row)
    return out


def _open(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def load_csv_series(path) -> SeriesSet:
    """Header row of variable ids, then one time step per row."""
    path = _open(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        rows = _parse_rows(path, reader, len(header), 2)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return SeriesSet(np.array(rows), tuple(h.strip() for h in header))


def save_csv_series(path, series: SeriesSet):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(series.ids)
        for row in series.values:
            w.writerow([_fmt(v) for v in row])


def save_matrix(path, m):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.atleast_2d(m):
            w.writerow([_fmt(v) for v in row])


def load_adjacency(path) -> np.ndarray:
    """N x N reals, no header."""
    path = _open(path)
    with path.open(newline="") as fh:
        rows = _parse_rows(path, csv.reader(fh), None, 1)
    m = np.array(rows)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DataFormatError(f"{path}: adjacency must be square, got {m.shape}")
    return m


def load_coords(path) -> tuple[list[str], np.ndarray]:
    """CSV with header ``id,x,y``."""
    path = _open(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["id", "x", "y"]:
            raise DataFormatError(f"{path}:1: expected header 'id,x,y', got {','.join(header)!r}")
        ids, xy = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                xy.append([float(row[1]), float(row[2])])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric coordinate in {row!r}") from None
            ids.append(row[0])
    return ids, np.array(xy).reshape(-1, 2)


def save_coords(path, ids, coords):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y"])
        for i, (x, y) in zip(ids, coords):
            w.writerow([i, _fmt(x), _fmt(y)])


def write_synthetic(outdir, series: SeriesSet, adj: np.ndarray, params: dict):
    """series.csv, adj.csv, coords.csv and meta.json in ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    save_csv_series(outdir / "series.csv", series)
    save_matrix(outdir / "adj.csv", adj)
    save_coords(outdir / "coords.csv", series.ids, series.coords)
    (outdir / "meta.json").write_text(json.dumps({"generator": "graph_diffusion", **params}, indent=2))
