"""Bidirectional LSTM over daily weather windows with additive attention.

Each event's T x W weather window is encoded to a D-dimensional latent
vector: two LSTM passes (forward and reversed time), per-step state
concatenation, a linear attention score per step, softmax over time, and a
tanh projection of the attention-weighted context. The whole computation is
built on a numcore tape so gradients flow to every parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import NonFiniteInput, ShapeMismatch

GATE_NAMES = ("input", "forget", "cell", "output")


@dataclass
class EncoderConfig:
    input_width: int = 9  # weather channels per day
    seq_len: int = 30  # days in the window
    hidden: int = 64  # LSTM state size per direction
    latent: int = 20  # projected latent dimension
    seed: int = 0

    def __post_init__(self):
        for name in ("input_width", "seq_len", "hidden", "latent"):
            if getattr(self, name) < 1:
                raise ShapeMismatch(f"EncoderConfig.{name} must be >= 1")


@dataclass
class CellParams:
    """One direction's LSTM cell: per-gate weights (W+d_h) x d_h and biases 1 x d_h.

    Gate order everywhere is (input, forget, cell, output).
    """

    w_input: np.ndarray
    w_forget: np.ndarray
    w_cell: np.ndarray
    w_output: np.ndarray
    b_input: np.ndarray
    b_forget: np.ndarray
    b_cell: np.ndarray
    b_output: np.ndarray

    def arrays(self):
        return [
            self.w_input, self.w_forget, self.w_cell, self.w_output,
            self.b_input, self.b_forget, self.b_cell, self.b_output,
        ]


@dataclass
class EncoderParams:
    config: EncoderConfig
    forward_cell: CellParams
    backward_cell: CellParams
    attn_w: np.ndarray  # 2d_h x 1
    attn_b: np.ndarray  # 1 x 1
    proj_w: np.ndarray  # 2d_h x D
    proj_b: np.ndarray  # 1 x D

    def arrays(self):
        return (
            self.forward_cell.arrays()
            + self.backward_cell.arrays()
            + [self.attn_w, self.attn_b, self.proj_w, self.proj_b]
        )

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, cfg: EncoderConfig, flat: np.ndarray) -> "EncoderParams":
        expected = param_count(cfg)
        if flat.size != expected:
            raise ShapeMismatch(f"expected {expected} parameters, got {flat.size}")
        shapes = _param_shapes(cfg)
        out, j = [], 0
        for shp in shapes:
            k = shp[0] * shp[1]
            out.append(np.asarray(flat[j : j + k], dtype=np.float64).reshape(shp))
            j += k
        return cls(
            config=cfg,
            forward_cell=CellParams(*out[0:8]),
            backward_cell=CellParams(*out[8:16]),
            attn_w=out[16],
            attn_b=out[17],
            proj_w=out[18],
            proj_b=out[19],
        )


def _param_shapes(cfg: EncoderConfig):
    win = cfg.input_width + cfg.hidden
    cell = [(win, cfg.hidden)] * 4 + [(1, cfg.hidden)] * 4
    return cell + cell + [
        (2 * cfg.hidden, 1),
        (1, 1),
        (2 * cfg.hidden, cfg.latent),
        (1, cfg.latent),
    ]


def param_count(cfg: EncoderConfig) -> int:
    return sum(r * c for r, c in _param_shapes(cfg))


def init_params(cfg: EncoderConfig) -> EncoderParams:
    """Seeded uniform(-1/sqrt(d_h), 1/sqrt(d_h)) weights; zero biases except
    the forget gates, which start at 1.0 to keep early memory open.

    Draw order is fixed (forward cell gates i/f/c/o, backward cell, attention,
    projection) so a seed reproduces parameters bit for bit.
    """
    rng = np.random.default_rng(cfg.seed)
    bound = 1.0 / np.sqrt(cfg.hidden)
    win = cfg.input_width + cfg.hidden

    def cell():
        ws = [rng.uniform(-bound, bound, size=(win, cfg.hidden)) for _ in range(4)]
        bs = [np.zeros((1, cfg.hidden)) for _ in range(4)]
        bs[1] = np.ones((1, cfg.hidden))  # forget gate
        return CellParams(*ws, *bs)

    fwd, bwd = cell(), cell()
    attn_w = rng.uniform(-bound, bound, size=(2 * cfg.hidden, 1))
    proj_w = rng.uniform(-bound, bound, size=(2 * cfg.hidden, cfg.latent))
    return EncoderParams(
        config=cfg,
        forward_cell=fwd,
        backward_cell=bwd,
        attn_w=attn_w,
        attn_b=np.zeros((1, 1)),
        proj_w=proj_w,
        proj_b=np.zeros((1, cfg.latent)),
    )


@dataclass
class EncoderLeaves:
    """Tape leaves for every parameter array, in flatten() order."""

    nodes: list

    def grads_flat(self) -> np.ndarray:
        return np.concatenate([n.grad.ravel() for n in self.nodes])


@dataclass
class EncoderOutput:
    latent: nc.Node  # N x D
    attention: nc.Node  # N x T, rows sum to 1
    hidden: list = field(default_factory=list)  # per-step N x 2d_h nodes
    leaves: EncoderLeaves | None = None
    step_inputs: list = field(default_factory=list)  # per-step N x W leaf nodes

    @property
    def Z(self) -> np.ndarray:
        return self.latent.value

    @property
    def alpha(self) -> np.ndarray:
        return self.attention.value


def _run_direction(tape, cell_nodes, steps, n, d_h):
    """Unroll one LSTM direction over a list of N x W input nodes."""
    w_i, w_f, w_c, w_o, b_i, b_f, b_c, b_o = cell_nodes
    # fused projection: one matmul per step instead of four
    w_all = nc.concat_cols([w_i, w_f, w_c, w_o])
    b_all = nc.concat_cols([b_i, b_f, b_c, b_o])
    h = tape.constant(np.zeros((n, d_h)))
    c = tape.constant(np.zeros((n, d_h)))
    out = []
    for x_t in steps:
        pre = nc.add(nc.matmul(nc.concat_cols([x_t, h]), w_all), b_all)
        gate_i = nc.sigmoid(nc.slice_cols(pre, 0, d_h))
        gate_f = nc.sigmoid(nc.slice_cols(pre, d_h, 2 * d_h))
        gate_c = nc.tanh(nc.slice_cols(pre, 2 * d_h, 3 * d_h))
        gate_o = nc.sigmoid(nc.slice_cols(pre, 3 * d_h, 4 * d_h))
        c = nc.add(nc.mul(gate_f, c), nc.mul(gate_i, gate_c))
        h = nc.mul(gate_o, nc.tanh(c))
        out.append(h)
    return out


def forward(params: EncoderParams, batch: np.ndarray, tape: nc.Tape) -> EncoderOutput:
    """Encode an N x T x W batch to an N x D latent matrix on the tape.

    Per step t the bidirectional state concatenates the forward pass state at
    t with the backward pass (reversed-sequence) state at the same original
    index. Attention scores are a single linear layer over that state.
    """
    cfg = params.config
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[1] != cfg.seq_len or batch.shape[2] != cfg.input_width:
        raise ShapeMismatch(
            f"batch shape {batch.shape} does not match (N, {cfg.seq_len}, {cfg.input_width})"
        )
    if not np.all(np.isfinite(batch)):
        raise NonFiniteInput("encoder batch contains NaN or Inf")
    n, t_len, d_h = batch.shape[0], cfg.seq_len, cfg.hidden

    leaf_nodes = [tape.leaf(a) for a in params.arrays()]
    leaves = EncoderLeaves(nodes=leaf_nodes)
    fwd_nodes, bwd_nodes = leaf_nodes[0:8], leaf_nodes[8:16]
    attn_w, attn_b, proj_w, proj_b = leaf_nodes[16:20]

    steps = [tape.constant(batch[:, t, :]) for t in range(t_len)]
    h_fwd = _run_direction(tape, fwd_nodes, steps, n, d_h)
    h_bwd_rev = _run_direction(tape, bwd_nodes, steps[::-1], n, d_h)
    h_bwd = h_bwd_rev[::-1]  # state for original index t

    hidden = [nc.concat_cols([h_fwd[t], h_bwd[t]]) for t in range(t_len)]

    scores = nc.concat_cols([nc.add(nc.matmul(hidden[t], attn_w), attn_b) for t in range(t_len)])
    attention = nc.softmax_rows(scores)

    context = nc.mul(nc.slice_cols(attention, 0, 1), hidden[0])
    for t in range(1, t_len):
        context = nc.add(context, nc.mul(nc.slice_cols(attention, t, t + 1), hidden[t]))

    latent = nc.tanh(nc.add(nc.matmul(context, proj_w), proj_b))

    rows = attention.value
    assert np.all(rows >= 0) and np.max(np.abs(rows.sum(axis=1) - 1.0)) < 1e-10

    return EncoderOutput(
        latent=latent,
        attention=attention,
        hidden=hidden,
        leaves=leaves,
        step_inputs=steps,
    )
