"""Network building blocks: correlation layer, linear layer, dropout,
LSTM cell and bidirectional LSTM layer.

All blocks operate on the autodiff tensors from odonet.tensor and accept
either single vectors ([D]) or row batches ([B,D]); the recurrent ops are
written against the batched form and promote vectors internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from . import tensor as T
from .errors import ContractError, DimensionError, DomainError
from .tensor import Tensor, make_op


# ---------------------------------------------------------------------------
# correlation

def correlation(feat_a: Tensor, feat_b: Tensor, max_disp: int, disp_stride: int = 1) -> Tensor:
    """Per-pixel normalized dot products over a displacement neighborhood.

    Accepts [C,H,W] or [N,C,H,W]; the output has one channel per
    displacement offset, D = (2*floor(max_disp/disp_stride)+1)**2, ordered
    row-major over (dy, dx). Out-of-bounds displaced positions contribute 0.
    """
    feat_a = T._as_tensor(feat_a)
    feat_b = T._as_tensor(feat_b)
    if feat_a.shape != feat_b.shape:
        raise DimensionError(
            f"correlation: feature shapes differ ({feat_a.shape} vs {feat_b.shape})"
        )
    if feat_a.ndim not in (3, 4):
        raise DimensionError(f"correlation: expected [C,H,W] or [N,C,H,W], got {feat_a.shape}")
    if max_disp < 0 or disp_stride < 1:
        raise DomainError(f"correlation: max_disp {max_disp} / disp_stride {disp_stride} invalid")

    single = feat_a.ndim == 3
    a = T.reshape(feat_a, (1, *feat_a.shape)) if single else feat_a
    b = T.reshape(feat_b, (1, *feat_b.shape)) if single else feat_b

    r = max_disp // disp_stride
    offs = [i * disp_stride for i in range(-r, r + 1)]
    offs_y = np.array([dy for dy in offs for _ in offs], dtype=np.int64)
    offs_x = np.array([dx for _ in offs for dx in offs], dtype=np.int64)

    ad = np.ascontiguousarray(a.data)
    bd = np.ascontiguousarray(b.data)
    out = backend.corr_forward(ad, bd, offs_y, offs_x)

    def fn(g):
        da, db = backend.corr_backward(ad, bd, np.ascontiguousarray(g), offs_y, offs_x)
        return da, db

    res = make_op("correlation", out, (a, b), fn)
    return T.reshape(res, res.shape[1:]) if single else res


def correlation_channels(max_disp: int, disp_stride: int = 1) -> int:
    r = max_disp // disp_stride
    return (2 * r + 1) ** 2


# ---------------------------------------------------------------------------
# linear

def linear(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weights.T + bias for x:[N,D], weights:[K,D], bias:[K]."""
    x = T._as_tensor(x)
    weights = T._as_tensor(weights)
    if x.ndim != 2 or weights.ndim != 2:
        raise DimensionError(f"linear: expected rank-2 x and weights, got {x.shape}, {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise DimensionError(
            f"linear: inner extents differ (x axis 1 = {x.shape[1]}, weights axis 1 = {weights.shape[1]})"
        )
    if bias is not None and bias.shape != (weights.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weights.shape[0]},)")

    out = x.data @ weights.data.T
    if bias is not None:
        out += bias.data
    xd, wd = x.data, weights.data
    inputs = (x, weights) if bias is None else (x, weights, bias)

    def fn(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weights.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_op("linear", out, inputs, fn)


# ---------------------------------------------------------------------------
# dropout

def dropout_mask(rng: np.random.Generator, shape: tuple[int, ...], rate: float, dtype) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability rate, survivors scaled."""
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype.type(1.0 - rate)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout: rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    mask = dropout_mask(rng, x.shape, rate, x.dtype)
    return T.mul(x, Tensor(mask))


# ---------------------------------------------------------------------------
# LSTM

@dataclass
class LstmParams:
    """Gate parameters of one LSTM direction.

    Input weights are [H, D], recurrent weights [H, H], biases [H], for the
    input (i), forget (f), cell candidate (g) and output (o) gates.
    """

    w_i: Tensor
    w_f: Tensor
    w_g: Tensor
    w_o: Tensor
    u_i: Tensor
    u_f: Tensor
    u_g: Tensor
    u_o: Tensor
    b_i: Tensor
    b_f: Tensor
    b_g: Tensor
    b_o: Tensor

    @property
    def hidden(self) -> int:
        return self.w_i.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_i.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {
            name: getattr(self, name)
            for name in ("w_i", "w_f", "w_g", "w_o", "u_i", "u_f", "u_g", "u_o",
                         "b_i", "b_f", "b_g", "b_o")
        }


def init_lstm_params(
    input_dim: int,
    hidden: int,
    rng: np.random.Generator,
    dtype=np.float32,
    forget_bias: float = 1.0,
) -> LstmParams:
    """Uniform fan-in-scaled weights; forget-gate bias starts at 1."""
    def w(rows, cols):
        bound = 1.0 / np.sqrt(cols)
        return Tensor(rng.uniform(-bound, bound, (rows, cols)).astype(dtype), requires_grad=True)

    def b(fill=0.0):
        return Tensor(np.full(hidden, fill, dtype=dtype), requires_grad=True)

    return LstmParams(
        w_i=w(hidden, input_dim), w_f=w(hidden, input_dim),
        w_g=w(hidden, input_dim), w_o=w(hidden, input_dim),
        u_i=w(hidden, hidden), u_f=w(hidden, hidden),
        u_g=w(hidden, hidden), u_o=w(hidden, hidden),
        b_i=b(), b_f=b(forget_bias), b_g=b(), b_o=b(),
    )


@dataclass
class BiLstmLayer:
    """Two LSTM directions over the same sequence; outputs concatenate to 2H."""

    forward_direction: LstmParams
    backward_direction: LstmParams

    def __post_init__(self):
        if self.forward_direction.hidden != self.backward_direction.hidden:
            raise DimensionError(
                "bilstm: directions disagree on hidden width "
                f"({self.forward_direction.hidden} vs {self.backward_direction.hidden})"
            )

    @property
    def hidden(self) -> int:
        return self.forward_direction.hidden


def init_bilstm_layer(input_dim, hidden, rng, dtype=np.float32) -> BiLstmLayer:
    return BiLstmLayer(
        forward_direction=init_lstm_params(input_dim, hidden, rng, dtype),
        backward_direction=init_lstm_params(input_dim, hidden, rng, dtype),
    )


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: LstmParams):
    """One LSTM recurrence step; accepts [D]/[H] vectors or [B,D]/[B,H] rows."""
    single = x.ndim == 1
    if single:
        x = T.reshape(x, (1, x.shape[0]))
        h_prev = T.reshape(h_prev, (1, h_prev.shape[0]))
        c_prev = T.reshape(c_prev, (1, c_prev.shape[0]))
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionError(
            f"lstm_step: input width {x.shape} does not match params input_dim {params.input_dim}"
        )
    if h_prev.shape != (x.shape[0], params.hidden) or c_prev.shape != h_prev.shape:
        raise DimensionError(
            f"lstm_step: state shapes {h_prev.shape}/{c_prev.shape} do not match "
            f"batch {x.shape[0]} and hidden {params.hidden}"
        )

    i = T.logistic(T.add(linear(x, params.w_i, params.b_i), linear(h_prev, params.u_i)))
    f = T.logistic(T.add(linear(x, params.w_f, params.b_f), linear(h_prev, params.u_f)))
    g = T.tanh(T.add(linear(x, params.w_g, params.b_g), linear(h_prev, params.u_g)))
    o = T.logistic(T.add(linear(x, params.w_o, params.b_o), linear(h_prev, params.u_o)))
    c = T.add(T.mul(f, c_prev), T.mul(i, g))
    h = T.mul(o, T.tanh(c))
    if single:
        h = T.reshape(h, (h.shape[1],))
        c = T.reshape(c, (c.shape[1],))
    return h, c


def _zero_state(like: Tensor, hidden: int) -> Tensor:
    shape = (hidden,) if like.ndim == 1 else (like.shape[0], hidden)
    return Tensor(np.zeros(shape, dtype=like.dtype))


def lstm_forward(seq: list[Tensor], params: LstmParams) -> list[Tensor]:
    """Unidirectional pass with zero initial state; returns h per step."""
    if not seq:
        raise ContractError("lstm_forward: empty sequence")
    h = _zero_state(seq[0], params.hidden)
    c = _zero_state(seq[0], params.hidden)
    outputs = []
    for x in seq:
        h, c = lstm_step(x, h, c, params)
        outputs.append(h)
    return outputs


def bilstm_forward(seq: list[Tensor], layer: BiLstmLayer) -> list[Tensor]:
    """output[t] = concat(forward_h[t], backward_h[t]); zero initial states.

    The backward direction consumes the reversed sequence, so its step-t
    output summarizes frames t..T-1.
    """
    if not seq:
        raise ContractError("bilstm_forward: empty sequence")
    fwd = lstm_forward(seq, layer.forward_direction)
    bwd = lstm_forward(list(reversed(seq)), layer.backward_direction)
    bwd.reverse()
    axis = 0 if seq[0].ndim == 1 else 1
    return [T.concat([f, b], axis=axis) for f, b in zip(fwd, bwd)]
