"""Finite-difference verification of end-to-end model gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .imputation import DropoutStream
from .recurrent import ForecastModel, first_layer, second_layer


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_parameter: str
    worst_index: tuple
    per_parameter: dict[str, float]
    n_checked: int
    seconds: float


def _loss(pred: ad.Var, y) -> ad.Var:
    return ad.mean(ad.absolute(ad.sub(pred, y)))


def check_model_gradients(model: ForecastModel, x_m, mask, y, seed: int = 0, step: float = 1e-4,
                          floor: float = 1e-7) -> GradCheckResult:
    """Compare tape gradients of the MAE loss with a fourth-order central
    difference stencil, entry by entry.

    Dropout masks are frozen: every evaluation reuses one stream, whose draws
    are a pure function of their key. The per-entry error is
    ``|g - fd| / max(|g|, |fd|, floor)``. Parameters that only act after the
    first layer are probed against a cached first-layer output, which is
    exact because that output does not depend on them.
    """
    t0 = time.perf_counter()
    stream = DropoutStream(seed)
    params = model.parameters()
    with ad.Tape() as tape:
        loss = _loss(ibn_forward_cached(model, x_m, mask, stream), y)
    grads = tape.backward(loss, list(params.values()))

    layer1 = first_layer(x_m, mask, model, stream)

    def full():
        return float(_loss(second_layer(first_layer(x_m, mask, model, stream), model, stream), y).value)

    def tail():
        return float(_loss(second_layer(layer1, model, stream), y).value)

    per_param, worst = {}, (0.0, "", ())
    n_checked = 0
    for name, p in params.items():
        f = tail if name.startswith(("l2.", "dec.")) else full
        g = grads[p.id]
        flat = p.value.reshape(-1)
        errs = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            vals = []
            for k in (1.0, -1.0, 2.0, -2.0):
                flat[i] = orig + k * step
                vals.append(f())
            flat[i] = orig
            fd = (8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12.0 * step)
            a = g.reshape(-1)[i]
            errs[i] = abs(a - fd) / max(abs(a), abs(fd), floor)
        n_checked += flat.size
        k = int(np.argmax(errs))
        per_param[name] = float(errs[k])
        if errs[k] > worst[0]:
            worst = (float(errs[k]), name, np.unravel_index(k, p.shape))
    return GradCheckResult(worst[0], worst[1], tuple(int(i) for i in worst[2]), per_param, n_checked,
                           time.perf_counter() - t0)


def ibn_forward_cached(model, x_m, mask, stream):
    return second_layer(first_layer(x_m, mask, model, stream), model, stream)
