"""MAE training with Adam, evaluation metrics, baselines and the ablation harness."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import load_tensors, save_tensors
from .data import MaskedSeries, Scaler
from .imputation import DropoutStream
from .recurrent import ForecastModel, ModelConfig, ibn_forward

log = logging.getLogger(__name__)

MAPE_FLOOR = 1e-3
EVAL_SEED = 20240917

VARIANTS = {
    "IBN": {},
    "UAI->IA": {"use_uai": False},
    "GGCN->AGCN": {"graph": "adaptive"},
    "Bi-RU->Uni-RU": {"bidirectional": False},
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 15
    clip_norm: float = 5.0
    seed: int = 0
    eval_seed: int = EVAL_SEED
    eval_batch_size: int = 256
    uai_to_ia: bool = False
    ggcn_to_agcn: bool = False
    bi_to_uni: bool = False

    def __post_init__(self):
        for name in ("lr", "batch_size", "clip_norm", "eval_batch_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"train.{name} must be positive, got {getattr(self, name)}")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("train.max_epochs must be >= 0 and train.patience >= 1")


def apply_ablation(model_cfg: ModelConfig, train_cfg: TrainConfig) -> ModelConfig:
    """Model config with the train-level ablation flags folded in."""
    changes = {}
    if train_cfg.uai_to_ia:
        changes["use_uai"] = False
    if train_cfg.ggcn_to_agcn:
        changes["graph"] = "adaptive"
    if train_cfg.bi_to_uni:
        changes["bidirectional"] = False
    return dataclasses.replace(model_cfg, **changes)


# -- metrics -------------------------------------------------------------------

@dataclass
class MetricReport:
    rmse: float
    mape: float | None
    mae: float
    per_variable: dict = field(default_factory=dict)
    normalized_mae: float | None = None

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "mape": self.mape,
            "mae": self.mae,
            "normalized_mae": self.normalized_mae,
            "per_variable": {k: [None if v is None else float(v) for v in vals]
                             for k, vals in self.per_variable.items()},
        }


def _mape(err, y):
    keep = np.abs(y) > MAPE_FLOOR
    if not keep.any():
        return None
    return float(np.mean(np.abs(err[keep]) / np.abs(y[keep])) * 100.0)


def metrics(y, y_hat, var_axis: int = -2) -> MetricReport:
    """MAE, RMSE and MAPE (percent) overall and per variable.

    MAPE skips targets with |y| <= 1e-3 and is ``None`` when nothing is left.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    err = y_hat - y
    if y.ndim < 2:
        y, err = y[None, :], err[None, :]
        var_axis = -2
    ye = np.moveaxis(y, var_axis, 0).reshape(y.shape[var_axis], -1)
    ee = np.moveaxis(err, var_axis, 0).reshape(ye.shape)
    per_var = {
        "mae": np.abs(ee).mean(axis=1).tolist(),
        "rmse": np.sqrt((ee**2).mean(axis=1)).tolist(),
        "mape": [_mape(e, t) for e, t in zip(ee, ye)],
    }
    return MetricReport(
        rmse=float(np.sqrt(np.mean(err**2))),
        mape=_mape(err, y),
        mae=float(np.mean(np.abs(err))),
        per_variable=per_var,
    )


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_step(params: dict[str, ad.Var], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> AdamState:
    """Clip by global norm, then one bias-corrected Adam update in place."""
    grads, _ = clip_by_global_norm(grads, config.clip_norm)
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.value = p.value - config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return state


# -- prediction and evaluation ---------------------------------------------------

def predict(model: ForecastModel, split: MaskedSeries, seed: int = EVAL_SEED, batch_size: int = 256,
            training: bool = False) -> np.ndarray:
    """Normalized-scale forecasts (W, N, L); batch ``i`` uses dropout pass ``i``."""
    out = []
    for i, lo in enumerate(range(0, len(split), batch_size)):
        stream = DropoutStream(seed, pass_id=i)
        y_hat = ibn_forward(split.x_m[lo:lo + batch_size], split.mask, model, stream, training=training)
        out.append(y_hat.value)
    return np.concatenate(out, axis=0) if out else np.zeros((0, *split.y.shape[1:]))


def report_from_predictions(split: MaskedSeries, y_hat: np.ndarray) -> MetricReport:
    rep = metrics(split.scaler.inverse(split.y, axis=-2), split.scaler.inverse(y_hat, axis=-2))
    rep.normalized_mae = float(np.mean(np.abs(y_hat - split.y)))
    return rep


def evaluate(model: ForecastModel, split: MaskedSeries, seed: int = EVAL_SEED,
             batch_size: int = 256) -> MetricReport:
    """Metrics in original units; MC dropout stays on with a fixed seed."""
    return report_from_predictions(split, predict(model, split, seed, batch_size))


def last_value_baseline(split: MaskedSeries) -> np.ndarray:
    """Repeat the last (zero-filled where missing) input step over the horizon."""
    last = split.x_m[..., -1, 0]
    return np.repeat(last[..., None], split.y.shape[-1], axis=-1)


def mean_baseline(split: MaskedSeries) -> np.ndarray:
    """Training mean, i.e. zero on the normalized scale."""
    return np.zeros_like(split.y)


# -- training --------------------------------------------------------------------

@dataclass
class TrainState:
    epoch: int = 0
    adam: AdamState = field(default_factory=AdamState)
    best_val: float = math.inf
    best_epoch: int = -1
    best_params: dict[str, np.ndarray] | None = None
    bad_epochs: int = 0
    stopped: bool = False
    history: list[dict] = field(default_factory=list)


def mae_loss(pred: ad.Var, y) -> ad.Var:
    return ad.mean(ad.absolute(ad.sub(pred, y)))


def train_epoch(model: ForecastModel, split: MaskedSeries, config: TrainConfig, epoch: int,
                adam: AdamState) -> float:
    params = model.parameters()
    leaves = list(params.values())
    order = np.random.default_rng([config.seed, epoch]).permutation(len(split))
    n_batches = math.ceil(len(split) / config.batch_size)
    total = 0.0
    for i in range(n_batches):
        idx = order[i * config.batch_size:(i + 1) * config.batch_size]
        stream = DropoutStream(config.seed, pass_id=epoch * n_batches + i)
        with ad.Tape() as tape:
            pred = ibn_forward(split.x_m[idx], split.mask, model, stream, training=True)
            loss = mae_loss(pred, split.y[idx])
        value = float(loss.value)
        if not math.isfinite(value):
            culprit = tape.first_nonfinite() or "unknown"
            raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, batch {i}; first non-finite: {culprit}")
        grads = tape.backward(loss, leaves)
        adam_step(params, {k: grads[v.id] for k, v in params.items()}, adam, config)
        total += value * len(idx)
    return total / len(split)


def train(model: ForecastModel, datasets: dict[str, MaskedSeries], config: TrainConfig,
          state: TrainState | None = None, epochs: int | None = None):
    """Minimize normalized MAE with early stopping on validation MAE.

    Continues from ``state`` when given (it is updated in place). ``epochs``
    caps how many epochs this call runs, for checkpoint/resume. The best
    validation parameters are loaded into ``model`` once training has
    finished; until then the model holds the live parameters.
    Returns ``(model, history)``.
    """
    state = state if state is not None else TrainState()
    stop_at = config.max_epochs if epochs is None else min(config.max_epochs, state.epoch + epochs)
    while state.epoch < stop_at and not state.stopped:
        t0 = time.perf_counter()
        train_mae = train_epoch(model, datasets["train"], config, state.epoch, state.adam)
        val_pred = predict(model, datasets["val"], config.eval_seed, config.eval_batch_size)
        val_mae = float(np.mean(np.abs(val_pred - datasets["val"].y)))
        state.epoch += 1
        state.history.append({"epoch": state.epoch, "train_mae": train_mae, "val_mae": val_mae,
                              "seconds": time.perf_counter() - t0})
        log.info("epoch %d train_mae %.5f val_mae %.5f", state.epoch, train_mae, val_mae)
        if val_mae < state.best_val:
            state.best_val, state.best_epoch, state.bad_epochs = val_mae, state.epoch, 0
            state.best_params = model.state_dict()
        else:
            state.bad_epochs += 1
            if state.bad_epochs >= config.patience:
                state.stopped = True
    if (state.stopped or state.epoch >= config.max_epochs) and state.best_params is not None:
        model.load_state_dict(state.best_params)
    return model, state.history


def write_history(path, history: list[dict]):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mae", "val_mae", "seconds"])
        for row in history:
            w.writerow([row["epoch"], f"{row['train_mae']:.17g}", f"{row['val_mae']:.17g}",
                        f"{row['seconds']:.3f}"])


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, model: ForecastModel, scaler: Scaler | None = None, mask=None,
                    state: TrainState | None = None, extra_meta: dict | None = None) -> Path:
    """Model parameters plus optional scaler, mask and resumable optimizer state."""
    tensors = dict(model.state_dict())
    tensors["graph.a_pre"] = model.a_pre
    if scaler is not None:
        tensors["scaler.mean"] = scaler.mean
        tensors["scaler.std"] = scaler.std
    if mask is not None:
        tensors["mask"] = np.asarray(mask, dtype=np.float64)
    meta = {"model": model.config.to_dict(), **(extra_meta or {})}
    if state is not None:
        for k in state.adam.m:
            tensors[f"adam.m.{k}"] = state.adam.m[k]
            tensors[f"adam.v.{k}"] = state.adam.v[k]
        if state.best_params is not None:
            for k, v in state.best_params.items():
                tensors[f"best.{k}"] = v
        meta["train_state"] = {
            "epoch": state.epoch, "adam_t": state.adam.t, "best_val": state.best_val,
            "best_epoch": state.best_epoch, "bad_epochs": state.bad_epochs, "stopped": state.stopped,
            "history": state.history,
        }
    return save_tensors(path, tensors, meta)


def load_checkpoint(path):
    """Returns ``(model, scaler, mask, state, meta)``; missing parts are ``None``."""
    tensors, meta = load_tensors(path)
    cfg = ModelConfig(**meta["model"])
    model = ForecastModel.init(cfg, tensors["graph.a_pre"])
    names = set(model.parameters())
    model.load_state_dict({k: tensors[k] for k in names})
    scaler = Scaler(tensors["scaler.mean"], tensors["scaler.std"]) if "scaler.mean" in tensors else None
    mask = tensors["mask"].astype(bool) if "mask" in tensors else None
    state = None
    ts = meta.get("train_state")
    if ts is not None:
        m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.m.")}
        v = {k[7:]: t for k, t in tensors.items() if k.startswith("adam.v.")}
        best = {k[5:]: t for k, t in tensors.items() if k.startswith("best.")} or None
        state = TrainState(epoch=ts["epoch"], adam=AdamState(m, v, ts["adam_t"]), best_val=ts["best_val"],
                           best_epoch=ts["best_epoch"], best_params=best, bad_epochs=ts["bad_epochs"],
                           stopped=ts["stopped"], history=ts["history"])
    return model, scaler, mask, state, meta


# -- ablation --------------------------------------------------------------------

def ablate(model_cfg: ModelConfig, train_cfg: TrainConfig, datasets: dict[str, MaskedSeries],
           a_pre: np.ndarray, seeds=(0, 1, 2), dataset_name: str = "synthetic",
           variants: dict[str, dict] | None = None) -> list[dict]:
    """Train every variant under each seed on the same data; one row per (variant, seed)."""
    variants = VARIANTS if variants is None else variants
    rows = []
    for seed in seeds:
        for name, change in variants.items():
            cfg = dataclasses.replace(model_cfg, **change)
            tcfg = dataclasses.replace(train_cfg, seed=seed)
            model = ForecastModel.init(cfg, a_pre, seed=seed)
            train(model, datasets, tcfg)
            rep = evaluate(model, datasets["test"], tcfg.eval_seed, tcfg.eval_batch_size)
            rows.append({"dataset": dataset_name, "variant": name, "seed": seed, "rmse": rep.rmse,
                         "mape": rep.mape, "mae": rep.mae, "params": model.num_parameters()})
            log.info("ablation %s seed %d: mae %.5f", name, seed, rep.mae)
    return rows


def summarize_ablation(rows: list[dict]) -> dict[str, dict[str, dict[str, float]]]:
    """dataset -> variant -> metric -> mean over seeds."""
    out: dict = {}
    for r in rows:
        out.setdefault(r["dataset"], {}).setdefault(r["variant"], []).append(r)
    for ds, by_var in out.items():
        for var, rs in by_var.items():
            by_var[var] = {m: float(np.mean([x[m] for x in rs if x[m] is not None] or [np.nan]))
                           for m in ("rmse", "mape", "mae")}
    return out


def write_ablation_csv(path, rows: list[dict]):
    """Table layout: one row per dataset, columns variant x metric (seed means)."""
    summary = summarize_ablation(rows)
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset"] + [f"{v}:{m}" for v in variants for m in ("rmse", "mape", "mae")])
        for ds, by_var in summary.items():
            w.writerow([ds] + [f"{by_var[v][m]:.17g}" for v in variants for m in ("rmse", "mape", "mae")])
