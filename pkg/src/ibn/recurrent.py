"""Gated graph-recurrent cell, bidirectional stacking and the convolutional decoder."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .graph import GGCNParams, adaptive_adjacency, ggcn_combine, make_graph_pair, propagate
from .imputation import (
    DROPOUT_RATE,
    MC_SAMPLES,
    DropoutStream,
    IAParams,
    UAIParams,
    interpolation_attention,
    uai_forward,
)

FORWARD, BACKWARD = 0, 1


@dataclass
class ModelConfig:
    n: int
    h: int
    l: int
    c: int = 1
    d: int = 16
    embed_dim: int = 8
    dropout: float = DROPOUT_RATE
    mc_samples: int = MC_SAMPLES
    bidirectional: bool = True
    use_uai: bool = True
    graph: str = "gaussian"
    tie_ggcn_weights: bool = False
    resample_per_gate: bool = False
    deterministic_eval: bool = False

    def __post_init__(self):
        for name in ("n", "h", "l", "c", "d", "embed_dim", "mc_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.graph not in ("gaussian", "adaptive"):
            raise ValueError(f"model.graph must be 'gaussian' or 'adaptive', got {self.graph!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"model.dropout must lie in [0, 1), got {self.dropout}")

    @property
    def width2(self) -> int:
        """Feature width of the second layer."""
        return 2 * self.d if self.bidirectional else self.d

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class IBNCellParams:
    uai: UAIParams
    ggcn_f: GGCNParams
    ggcn_r: GGCNParams
    ggcn_c: GGCNParams
    ia: IAParams | None = None
    adaptive: tuple[Var, Var] | None = None

    @property
    def width(self) -> int:
        return self.uai.w.shape[0]

    def named_parameters(self, prefix: str):
        if self.ia is not None:
            yield from self.ia.named_parameters(f"{prefix}.ia")
        yield from self.uai.named_parameters(f"{prefix}.uai")
        yield from self.ggcn_f.named_parameters(f"{prefix}.ggcn_f")
        yield from self.ggcn_r.named_parameters(f"{prefix}.ggcn_r")
        yield from self.ggcn_c.named_parameters(f"{prefix}.ggcn_c")
        if self.adaptive is not None:
            yield f"{prefix}.agcn.e1", self.adaptive[0]
            yield f"{prefix}.agcn.e2", self.adaptive[1]


@dataclass
class CellOptions:
    """Per-call switches for a cell step. ``force_f``/``force_r`` are test hooks."""

    deterministic: bool = False
    resample_per_gate: bool = False
    force_f: float | None = None
    force_r: float | None = None
    trace: list | None = field(default=None, repr=False)


def _glorot(rng, fan_in, fan_out, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def _leaf(value):
    return Var(value, requires_grad=True)


def init_cell(rng, width: int, config: ModelConfig, input_dim: int | None = None) -> IBNCellParams:
    """Random cell parameters; ``input_dim`` adds the first-layer imputation block."""

    def ggcn():
        w = _leaf(_glorot(rng, width, width))
        return GGCNParams(w, w if config.tie_ggcn_weights else _leaf(_glorot(rng, width, width)))

    ia = None
    if input_dim is not None:
        ia = IAParams(
            node_embed=_leaf(rng.standard_normal((config.n, config.embed_dim))),
            proj_w=_leaf(_glorot(rng, input_dim, width)),
            proj_b=_leaf(np.zeros(width)),
        )
    uai = UAIParams(_leaf(_glorot(rng, width, width)), _leaf(np.zeros(width)),
                    p=config.dropout, s=config.mc_samples)
    cell = IBNCellParams(uai, ggcn(), ggcn(), ggcn(), ia=ia)
    if config.graph == "adaptive":
        shape = (config.n, config.embed_dim)
        cell.adaptive = (_leaf(rng.standard_normal(shape)), _leaf(rng.standard_normal(shape)))
    return cell


def reconstruct(x_t, mask, params: IBNCellParams, stream: DropoutStream | None, key, opts: CellOptions):
    """Input block of the cell: projection and attention fill (first layer), then UAI."""
    x = ad.as_var(x_t)
    if params.ia is not None:
        x = ad.add(ad.matmul(x, params.ia.proj_w), params.ia.proj_b)
        x = interpolation_attention(x, mask, params.ia)
    if x.shape[-1] != params.width:
        raise ad.ShapeError(f"cell input width {x.shape[-1]} does not match cell width {params.width}")
    return uai_forward(x, params.uai, stream, key, deterministic=opts.deterministic)


def ibn_cell_step(x_t, mask, c_prev, params: IBNCellParams, a_pre: np.ndarray,
                  stream: DropoutStream | None = None, key: tuple[int, ...] = (0, 0, 0),
                  opts: CellOptions | None = None) -> tuple[Var, Var]:
    """One recurrent step: returns ``(h_t, c_t)``.

    With the default options the reconstructed input u = UAI(IA(x_t)) is drawn
    once and shared by the three gates and the output mix.
    """
    opts = opts or CellOptions()
    c_prev = ad.as_var(c_prev)
    adaptive = adaptive_adjacency(*params.adaptive) if params.adaptive is not None else None
    n_draws = 4 if opts.resample_per_gate and not opts.deterministic else 1

    draws = []
    for g in range(n_draws):
        out = reconstruct(x_t, mask, params, stream, (*key, g), opts)
        pair = make_graph_pair(out.x_hat, a_pre, adaptive)
        draws.append((out, propagate(out.x_hat, pair), pair))
    u_f, u_r, u_c, u_h = (draws * 4)[:4] if n_draws == 1 else draws

    if c_prev.shape != u_f[0].x_hat.shape:
        raise ad.ShapeError(f"cell state {c_prev.shape} does not match reconstructed input {u_f[0].x_hat.shape}")

    if opts.force_f is None:
        f = ad.gelu(ggcn_combine(*u_f[1], params.ggcn_f))
    else:
        f = Var(np.full(c_prev.shape, opts.force_f))
    if opts.force_r is None:
        r = ad.gelu(ggcn_combine(*u_r[1], params.ggcn_r))
    else:
        r = Var(np.full(c_prev.shape, opts.force_r))
    cand = ggcn_combine(*u_c[1], params.ggcn_c)
    c_t = ad.add(ad.mul(f, c_prev), ad.mul(ad.sub(1.0, f), cand))
    u = u_h[0].x_hat
    h_t = ad.add(ad.mul(ad.sub(1.0, r), u), ad.mul(r, ad.elu(c_t)))

    if opts.trace is not None:
        out = u_h[0]
        opts.trace.append({"mu": out.mu.value, "sigma": out.sigma.value,
                           "x_hat": out.x_hat.value, "a_gau": u_h[2].a_gau.value})
    return h_t, c_t


def run_ru(seq: Sequence, mask, params: IBNCellParams, a_pre: np.ndarray, direction: int = FORWARD,
           stream: DropoutStream | None = None, layer: int = 1, tag: int | None = None,
           opts: CellOptions | None = None) -> list[Var]:
    """Run the cell over a sequence; the result is indexed by original time position.

    Dropout keys are ``(layer, tag, step)`` where ``step`` counts iterations in
    processing order and ``tag`` defaults to the direction.
    """
    if len(seq) == 0:
        raise ValueError("empty sequence")
    tag = direction if tag is None else tag
    order = range(len(seq)) if direction == FORWARD else range(len(seq) - 1, -1, -1)
    out: list[Var | None] = [None] * len(seq)
    c = None
    for step, t in enumerate(order):
        if c is None:
            lead = ad.as_var(seq[t]).shape[:-1]
            c = Var(np.zeros((*lead, params.width)))
        h, c = ibn_cell_step(seq[t], mask, c, params, a_pre, stream, (layer, tag, step), opts)
        out[t] = h
    return out


def init_decoder(rng, width: int, l: int) -> dict[str, Var]:
    return {
        "conv1_w": _leaf(_glorot(rng, 2 * width, l, shape=(l, 2, 1, width))),
        "conv1_b": _leaf(np.zeros(l)),
        "conv2_w": _leaf(_glorot(rng, l, l, shape=(l, l, 1, 1))),
        "conv2_b": _leaf(np.zeros(l)),
    }


def decode(h1, h2, dec: dict[str, Var]) -> Var:
    """Two-channel 1 x width convolution, GeLU, then a 1 x 1 convolution.

    ``h1`` and ``h2`` are (..., N, width) and form the two input channels; the
    first kernel spans the full width, so each output channel is one number
    per variable. Returns (..., N, L).
    """
    h1, h2 = ad.as_var(h1), ad.as_var(h2)
    l, _, _, width = dec["conv1_w"].shape
    if h1.shape[-1] != width or h2.shape[-1] != width:
        raise ad.ShapeError(f"decoder expects width {width}, got {h1.shape} and {h2.shape}")
    stacked = ad.concat([h1, h2], axis=-1)
    k1 = ad.transpose(ad.reshape(dec["conv1_w"], (l, 2 * width)))
    z = ad.gelu(ad.add(ad.matmul(stacked, k1), dec["conv1_b"]))
    k2 = ad.transpose(ad.reshape(dec["conv2_w"], (l, l)))
    return ad.add(ad.matmul(z, k2), dec["conv2_b"])


class ForecastModel:
    """Bidirectional first layer, unidirectional second layer, conv decoder."""

    def __init__(self, config: ModelConfig, a_pre: np.ndarray, cells: dict[str, IBNCellParams],
                 decoder: dict[str, Var]):
        a_pre = np.asarray(a_pre, dtype=np.float64)
        if a_pre.shape != (config.n, config.n):
            raise ValueError(f"predefined graph {a_pre.shape} does not match n={config.n}")
        self.config = config
        self.a_pre = a_pre
        self.cells = cells
        self.decoder = decoder

    @classmethod
    def init(cls, config: ModelConfig, a_pre: np.ndarray, seed: int = 0) -> "ForecastModel":
        rng = np.random.default_rng(seed)
        cells = {"l1f": init_cell(rng, config.d, config, input_dim=config.c)}
        if config.bidirectional:
            cells["l1b"] = init_cell(rng, config.d, config, input_dim=config.c)
        cells["l2"] = init_cell(rng, config.width2, config)
        return cls(config, a_pre, cells, init_decoder(rng, config.width2, config.l))

    def parameters(self) -> dict[str, Var]:
        out = {}
        for name, cell in self.cells.items():
            out.update(cell.named_parameters(name))
        for key, v in self.decoder.items():
            out[f"dec.{key}"] = v
        for name, v in out.items():
            v.name = name
        return out

    def num_parameters(self) -> int:
        return sum(v.value.size for v in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.parameters()
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, v in params.items():
            if state[k].shape != v.shape:
                raise ValueError(f"{k}: shape {state[k].shape} does not match {v.shape}")
            v.value = np.array(state[k], dtype=np.float64)


def _resolve_options(cfg: ModelConfig, training: bool, cell_opts: CellOptions | None):
    deterministic = not cfg.use_uai or (cfg.deterministic_eval and not training)
    base = cell_opts or CellOptions()
    return dataclasses.replace(base, deterministic=deterministic or base.deterministic,
                               resample_per_gate=cfg.resample_per_gate or base.resample_per_gate)


def first_layer(x_m, mask, model: ForecastModel, stream: DropoutStream | None = None,
                training: bool = True, trace: dict | None = None,
                cell_opts: CellOptions | None = None) -> tuple[list[Var], Var]:
    """Layer-1 hidden sequence fed to layer 2, and the state passed to the decoder."""
    cfg = model.config
    x_m = np.asarray(x_m, dtype=np.float64)
    if x_m.shape[-3:] != (cfg.n, cfg.h, cfg.c):
        raise ValueError(f"input {x_m.shape} does not match (n, h, c) = {(cfg.n, cfg.h, cfg.c)}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (cfg.n,):
        raise ValueError(f"mask shape {mask.shape} does not match n={cfg.n}")
    base = _resolve_options(cfg, training, cell_opts)
    o1 = dataclasses.replace(base, trace=[]) if trace is not None else base
    steps = [x_m[..., t, :] for t in range(cfg.h)]
    hid_f = run_ru(steps, mask, model.cells["l1f"], model.a_pre, FORWARD, stream, 1, opts=o1)
    if trace is not None:
        trace["l1f"] = o1.trace
    if not cfg.bidirectional:
        return hid_f, hid_f[-1]
    hid_b = run_ru(steps, mask, model.cells["l1b"], model.a_pre, BACKWARD, stream, 1, opts=base)
    seq2 = [ad.concat([a, b], axis=-1) for a, b in zip(hid_f, hid_b)]
    return seq2, seq2[-1]


def second_layer(layer1: tuple[list[Var], Var], model: ForecastModel, stream: DropoutStream | None = None,
                 training: bool = True, cell_opts: CellOptions | None = None) -> Var:
    """Layer 2 over the layer-1 sequence, then the decoder."""
    seq2, top1 = layer1
    observed = np.ones(model.config.n, dtype=bool)
    opts = _resolve_options(model.config, training, cell_opts)
    hid2 = run_ru(seq2, observed, model.cells["l2"], model.a_pre, FORWARD, stream, 2, opts=opts)
    return decode(top1, hid2[-1], model.decoder)


def ibn_forward(x_m, mask, model: ForecastModel, stream: DropoutStream | None = None,
                training: bool = True, trace: dict | None = None,
                cell_opts: CellOptions | None = None) -> Var:
    """Forecast (..., N, L) from zero-filled history (..., N, H, C).

    ``trace``, when given, receives the per-step internals of the forward
    layer-1 cell under ``"l1f"``.
    """
    layer1 = first_layer(x_m, mask, model, stream, training, trace, cell_opts)
    return second_layer(layer1, model, stream, training, cell_opts)
