"""Command-line entry point: ``ibn {synth,train,eval,ablate,diagnose}``.

Every command writes into a fresh run directory ``<runs>/<timestamp>-seed<seed>``
(``synth --out`` picks the directory explicitly). Failures print a single
JSON line ``{"error": <kind>, "message": ...}`` to stderr and exit with 2 for
configuration problems or 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config, model_config, train_config
from .data import (
    DataFormatError,
    SeriesSet,
    generate_synthetic,
    load_adjacency,
    load_csv_series,
    prepare_dataset,
    write_synthetic,
)
from .diagnostics import export_adjacency, uncertainty_diagnostics, write_adjacency
from .recurrent import ForecastModel
from .training import (
    VARIANTS,
    TrainingDiverged,
    TrainState,
    ablate,
    apply_ablation,
    evaluate,
    last_value_baseline,
    load_checkpoint,
    mean_baseline,
    report_from_predictions,
    save_checkpoint,
    train,
    write_ablation_csv,
    write_history,
)

log = logging.getLogger("ibn")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclasses.dataclass(frozen=True)
class RunManifest:
    command: str
    config: dict
    seed: int
    dataset_fingerprint: str
    code_version: str
    started: str

    def write(self, run_dir: Path):
        (run_dir / "manifest.json").write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True))


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat()


def make_run_dir(root, seed: int) -> Path:
    stamp = dt.datetime.now(dt.timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    path = Path(root) / f"{stamp}-seed{seed}"
    path.mkdir(parents=True, exist_ok=False)
    return path


def _finish(run_dir: Path, **extra):
    (run_dir / "completed.json").write_text(json.dumps({"finished": _now(), **extra}, indent=2))


def fingerprint(series: SeriesSet, a_pre: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(series.values, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(a_pre, dtype="<f8").tobytes())
    return h.hexdigest()


def _row_normalize(a: np.ndarray) -> np.ndarray:
    if (a < 0).any():
        raise DataFormatError("adjacency weights must be nonnegative")
    a = a.copy()
    empty = a.sum(axis=1) == 0
    a[empty, empty] = 1.0
    return a / a.sum(axis=1, keepdims=True)


def load_data(config: dict):
    """``(series, a_pre, datasets)`` for the configured source."""
    data = config["data"]
    if data["source"] == "synthetic":
        series, a_pre = generate_synthetic(data["n"], data["t"], data["seed"], data["alpha"], data["beta"],
                                           data["period"], data["noise_std"])
    else:
        series = load_csv_series(data["series"])
        a_pre = _row_normalize(load_adjacency(data["adjacency"]))
        if a_pre.shape[0] != series.n:
            raise DataFormatError(f"adjacency has {a_pre.shape[0]} nodes but the series has {series.n} variables")
    ds = prepare_dataset(series, data["h"], data["l"], config["mask"]["rate"], config["mask"]["seed"],
                         tuple(data["splits"]), data["stride"])
    return series, a_pre, ds


def _start_run(args, command: str, config: dict, series, a_pre) -> Path:
    seed = config["train"]["seed"]
    run_dir = make_run_dir(args.runs, seed)
    RunManifest(command, config, seed, fingerprint(series, a_pre), __version__, _now()).write(run_dir)
    (run_dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))
    return run_dir


def _dump(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


# -- commands ----------------------------------------------------------------------

def cmd_synth(args, overrides):
    if overrides:
        raise ConfigError(f"synth takes no config overrides, got {overrides[0][0]}")
    series, adj = generate_synthetic(args.n, args.t, args.seed, args.alpha, args.beta, args.period, args.noise_std)
    if args.out is not None:
        out = Path(args.out)
    else:
        out = make_run_dir(args.runs, args.seed)
    params = {"n": args.n, "t": args.t, "seed": args.seed, "alpha": args.alpha, "beta": args.beta,
              "period": args.period, "noise_std": args.noise_std}
    write_synthetic(out, series, adj, params)
    print(out)


def cmd_train(args, overrides):
    config = load_config(args.config, overrides)
    series, a_pre, ds = load_data(config)
    tcfg = train_config(config)
    mcfg = apply_ablation(model_config(config, series.n), tcfg)
    run_dir = _start_run(args, "train", config, series, a_pre)
    model = ForecastModel.init(mcfg, a_pre, seed=tcfg.seed)
    state = TrainState()
    train(model, ds, tcfg, state=state)
    write_history(run_dir / "history.csv", state.history)
    save_checkpoint(run_dir / "checkpoint", model, ds["train"].scaler, ds["train"].mask, state,
                    extra_meta={"config": config})
    report = {split: evaluate(model, ds[split], tcfg.eval_seed, tcfg.eval_batch_size).to_dict()
              for split in ("val", "test")}
    report["baselines"] = {
        "last_value": report_from_predictions(ds["test"], last_value_baseline(ds["test"])).to_dict(),
        "train_mean": report_from_predictions(ds["test"], mean_baseline(ds["test"])).to_dict(),
    }
    report["best_epoch"] = state.best_epoch
    _dump(run_dir / "report.json", report)
    _finish(run_dir, epochs=state.epoch)
    print(run_dir)


def _resolve_checkpoint(path) -> Path:
    path = Path(path)
    if (path / "checkpoint" / "manifest.json").exists():
        return path / "checkpoint"
    if (path / "manifest.json").exists() and (path / "weights.bin").exists():
        return path
    raise FileNotFoundError(f"no checkpoint found at {path}")


def _load_run(args):
    model, _, mask, _, meta = load_checkpoint(_resolve_checkpoint(args.checkpoint))
    if "config" not in meta:
        raise ConfigError("checkpoint does not record its run configuration")
    config = meta["config"]
    series, a_pre, ds = load_data(config)
    if mask is not None and not np.array_equal(mask, ds["train"].mask):
        raise DataFormatError("dataset mask differs from the one stored in the checkpoint")
    return model, config, series, a_pre, ds


def cmd_eval(args, overrides):
    if overrides:
        raise ConfigError("eval takes its configuration from the checkpoint")
    model, config, series, a_pre, ds = _load_run(args)
    tcfg = train_config(config)
    rep = evaluate(model, ds[args.split], tcfg.eval_seed, tcfg.eval_batch_size)
    run_dir = _start_run(args, "eval", config, series, a_pre)
    out = {"split": args.split, "checkpoint": str(args.checkpoint), **rep.to_dict()}
    _dump(run_dir / "report.json", out)
    _finish(run_dir)
    print(json.dumps({"run_dir": str(run_dir), "split": args.split, "mae": rep.mae, "rmse": rep.rmse,
                      "mape": rep.mape, "normalized_mae": rep.normalized_mae}))


def cmd_ablate(args, overrides):
    config = load_config(args.config, overrides)
    series, a_pre, ds = load_data(config)
    tcfg = train_config(config)
    mcfg = model_config(config, series.n)
    ab = config["ablation"]
    variants = {name: VARIANTS[name] for name in ab["variants"]}
    run_dir = _start_run(args, "ablate", config, series, a_pre)
    rows = ablate(mcfg, tcfg, ds, a_pre, seeds=tuple(ab["seeds"]), dataset_name=ab["dataset_name"],
                  variants=variants)
    write_ablation_csv(run_dir / "ablation.csv", rows)
    with (run_dir / "ablation_runs.csv").open("w") as fh:
        fh.write("dataset,variant,seed,rmse,mape,mae,params\n")
        for r in rows:
            mape = "nan" if r["mape"] is None else f"{r['mape']:.17g}"
            fh.write(f"{r['dataset']},{r['variant']},{r['seed']},{r['rmse']:.17g},{mape},{r['mae']:.17g},"
                     f"{r['params']}\n")
    _finish(run_dir)
    print(run_dir)


def cmd_diagnose(args, overrides):
    if args.checkpoint is not None:
        if overrides or args.config is not None:
            raise ConfigError("diagnose takes either --checkpoint or --config with overrides, not both")
        model, config, series, a_pre, ds = _load_run(args)
    else:
        config = load_config(args.config, overrides)
        series, a_pre, ds = load_data(config)
        tcfg = train_config(config)
        model = ForecastModel.init(apply_ablation(model_config(config, series.n), tcfg), a_pre, seed=tcfg.seed)
    tcfg = train_config(config)
    split = ds[args.split]
    run_dir = _start_run(args, "diagnose", config, series, a_pre)
    table = uncertainty_diagnostics(model, split, tcfg.eval_seed, tcfg.eval_batch_size)
    table.write_csv(run_dir / "uncertainty.csv")
    if not 0 <= args.window < len(split):
        raise IndexError(f"window {args.window} outside split of {len(split)} windows")
    a_pre_out, a_gau = export_adjacency(model, split.x_m[args.window], split.mask, tcfg.eval_seed)
    write_adjacency(run_dir, a_pre_out, a_gau)
    _dump(run_dir / "diagnostics.json", {"split": args.split, "spearman_rho": table.rho,
                                          "rows": int(table.sigma.size), "window": args.window})
    _finish(run_dir)
    print(json.dumps({"run_dir": str(run_dir), "spearman_rho": table.rho}))


# -- argument handling -------------------------------------------------------------

def _split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for {tok}")
            value = extra[i + 1]
            i += 2
        out.append((key, value))
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ibn", description="Forecasting with missing variables: synthetic data, training, "
                                        "evaluation, ablation and diagnostics.")
    p.add_argument("--version", action="version", version=f"ibn {__version__}")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic graph-diffusion dataset")
    s.add_argument("--n", type=int, default=12)
    s.add_argument("--t", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--alpha", type=float, default=0.5)
    s.add_argument("--beta", type=float, default=0.5)
    s.add_argument("--period", type=float, default=24.0)
    s.add_argument("--noise-std", type=float, default=0.1)
    s.add_argument("--out", default=None, help="output directory (default: a new run directory)")

    for name, help_ in (("train", "train a model"), ("ablate", "train every ablation variant over seeds")):
        t = sub.add_parser(name, help=help_, description="Config keys may be overridden as --section.key value.")
        t.add_argument("--config", default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")

    d = sub.add_parser("diagnose", help="uncertainty and adjacency exports")
    d.add_argument("--checkpoint", default=None)
    d.add_argument("--config", default=None)
    d.add_argument("--split", choices=("train", "val", "test"), default="test")
    d.add_argument("--window", type=int, default=0)

    for sp in sub.choices.values():
        sp.add_argument("--runs", default="runs", help="root directory for run outputs")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "diagnose": cmd_diagnose}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    msg = str(exc) or type(exc).__name__
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": " ".join(msg.split())}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args, extra = build_parser().parse_known_args(argv)
        overrides = _split_overrides(extra)
    except ConfigError as exc:
        return _fail("config", exc, 2)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args, overrides)
    except ConfigError as exc:
        return _fail("config", exc, 2)
    except (TrainingDiverged, DataFormatError, FileNotFoundError, OSError, ValueError, IndexError,
            KeyError) as exc:
        return _fail("runtime", exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
