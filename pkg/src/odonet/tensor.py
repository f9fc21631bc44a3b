"""Dense tensors with reverse-mode automatic differentiation.

Storage is a row-major numpy array (float32 or float64). Every executed
differentiable operation appends one node to the active ComputationTape;
``backward`` replays the tape in reverse insertion order, which visits each
node at most once and accumulates gradients additively at fan-out points.
The fixed replay order makes gradients bit-reproducible.

Only explicit non-negative axis indices are accepted anywhere; negative
axes are rejected rather than interpreted.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import backend
from .errors import ContractError, DimensionError, NumericError

FLOAT_DTYPES = (np.float32, np.float64)
DEFAULT_LEAKY_SLOPE = 0.1


class ComputationTape:
    """Ordered record of executed differentiable operations.

    Use as a context manager to scope recording (the training engine opens
    one tape per micro batch so memory is released deterministically). A
    module-level base tape exists so small scripts and tests can just run
    ops and call backward without any setup.
    """

    __slots__ = ("nodes", "check_finite")

    def __init__(self, check_finite: bool = False):
        self.nodes: list[_Node] = []
        self.check_finite = check_finite

    def clear(self) -> None:
        self.nodes.clear()

    def __enter__(self) -> "ComputationTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        popped = _TAPES.pop()
        assert popped is self, "tape context exited out of order"
        return False


_TAPES: list[ComputationTape] = [ComputationTape()]


def active_tape() -> ComputationTape:
    return _TAPES[-1]


def reset_base_tape() -> None:
    """Drop all nodes recorded on the module-level base tape."""
    _TAPES[0].clear()


class _Node:
    __slots__ = ("op", "inputs", "out", "fn")

    def __init__(self, op, inputs, out, fn):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.fn = fn


class Tensor:
    """n-dimensional dense array participating in the differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: ComputationTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; all arithmetic funnels through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like_dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like_dtype if like_dtype is not None else np.float64))


def make_op(
    op: str,
    out_data: np.ndarray,
    inputs: tuple[Tensor, ...],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap an executed op's result and record it on the active tape.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input, in input order. Recording is skipped when no input requires
    gradients; the finite check (active inside grad_check) always runs.
    """
    tape = _TAPES[-1]
    if tape.check_finite and not np.all(np.isfinite(out_data)):
        raise NumericError(f"op '{op}' produced non-finite values", op=op)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if requires:
        out._tape = tape
        tape.nodes.append(_Node(op, inputs, out, backward_fn))
    return out


def backward(result: Tensor) -> None:
    """Populate .grad on every reachable requires_grad tensor.

    Repeated calls accumulate into existing .grad buffers. Each call
    propagates only from ``result``: per-pass gradients are kept separate
    and folded into .grad at the end.
    """
    if result.size != 1:
        raise ContractError(f"backward needs a scalar result, got shape {result.shape}")
    tape = result._tape if result._tape is not None else _TAPES[-1]
    pass_grads: dict[int, np.ndarray] = {id(result): np.ones_like(result.data)}
    holders: dict[int, Tensor] = {id(result): result}
    for node in reversed(tape.nodes):
        gout = pass_grads.get(id(node.out))
        if gout is None:
            continue
        gins = node.fn(gout)
        for t, g in zip(node.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in pass_grads:
                pass_grads[key] = pass_grads[key] + g
            else:
                pass_grads[key] = g
                holders[key] = t
    for key, t in holders.items():
        if not t.requires_grad:
            continue
        g = pass_grads[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# broadcasting helpers

def _check_broadcast(op: str, sa: tuple[int, ...], sb: tuple[int, ...]) -> None:
    for i in range(1, min(len(sa), len(sb)) + 1):
        a, b = sa[-i], sb[-i]
        if a != b and a != 1 and b != 1:
            raise DimensionError(
                f"{op}: shapes {sa} and {sb} do not broadcast: "
                f"axis {len(sa) - i} of the left operand ({a}) vs "
                f"axis {len(sb) - i} of the right ({b})"
            )


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_axes(op: str, axes: Iterable[int], ndim: int) -> tuple[int, ...]:
    axes = tuple(axes)
    seen = set()
    for ax in axes:
        if not isinstance(ax, (int, np.integer)) or ax < 0:
            raise DimensionError(f"{op}: axis {ax!r} invalid; only explicit non-negative axes are supported")
        if ax >= ndim:
            raise DimensionError(f"{op}: axis {ax} out of range for rank {ndim}")
        if ax in seen:
            raise DimensionError(f"{op}: axis {ax} given twice")
        seen.add(ax)
    return axes


# ---------------------------------------------------------------------------
# elementwise ops

def _coerce_pair(op: str, a, b) -> tuple[Tensor, Tensor]:
    # bare scalars/arrays adopt the tensor operand's dtype so float32
    # graphs are not silently promoted to float64
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(op, a.shape, b.shape)
    return a, b


def add(a, b) -> Tensor:
    a, b = _coerce_pair("add", a, b)
    out = a.data + b.data

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op("add", out, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair("sub", a, b)
    out = a.data - b.data

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_op("sub", out, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair("mul", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return make_op("mul", out, (a, b), fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


def logistic(x) -> Tensor:
    x = _as_tensor(x)
    # stable in both tails: exp of a non-positive argument only
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)

    def fn(g):
        return (g * out * (1.0 - out),)

    return make_op("logistic", out, (x,), fn)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)

    def fn(g):
        return (g * (1.0 - out * out),)

    return make_op("tanh", out, (x,), fn)


def leaky_relu(x, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    x = _as_tensor(x)
    pos = x.data >= 0  # subgradient at 0 takes the positive branch
    out = np.where(pos, x.data, x.data * x.dtype.type(slope))

    def fn(g):
        return (np.where(pos, g, g * x.dtype.type(slope)),)

    return make_op("leaky_relu", out, (x,), fn)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)

    def fn(g):
        return (g * out,)

    return make_op("exp", out, (x,), fn)


def log(x) -> Tensor:
    x = _as_tensor(x)
    out = np.log(x.data)
    xd = x.data

    def fn(g):
        return (g / xd,)

    return make_op("log", out, (x,), fn)


def pow_scalar(x, exponent: float) -> Tensor:
    """x ** exponent for a python-float exponent and non-negative base."""
    x = _as_tensor(x)
    p = float(exponent)
    out = np.power(x.data, p)
    xd = x.data

    def fn(g):
        if p == 0.0:
            return (np.zeros_like(g),)
        return (g * p * np.power(xd, p - 1.0),)

    return make_op("pow", out, (x,), fn)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through the interior."""
    x = _as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def fn(g):
        return (np.where(inside, g, 0.0).astype(g.dtype, copy=False),)

    return make_op("clip", out, (x,), fn)


def softplus(x) -> Tensor:
    """log(1 + exp(x)) with overflow-safe evaluation; gradient is logistic."""
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    e = np.exp(-np.abs(x.data))
    sig = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def fn(g):
        return (g * sig,)

    return make_op("softplus", out.astype(x.dtype, copy=False), (x,), fn)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "logistic": logistic,
    "tanh": tanh,
    "leaky_relu": leaky_relu,
}


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch by name over the documented elementwise op set."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}")
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# structural ops

def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: expected rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: inner extents differ (left axis 1 = {a.shape[1]}, right axis 0 = {b.shape[0]})"
        )
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return make_op("matmul", out, (a, b), fn)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape

    def fn(g):
        return (g.reshape(old),)

    return make_op("reshape", x.data.reshape(shape), (x,), fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: need at least one tensor")
    _check_axes("concat", (axis,), tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim:
            raise DimensionError(f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
        for ax in range(t.ndim):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise DimensionError(
                    f"concat: axis {ax} differs ({tensors[0].shape[ax]} vs {t.shape[ax]})"
                )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op("concat", out, tuple(tensors), fn)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    x = _as_tensor(x)
    _check_axes("narrow", (axis,), x.ndim)
    if start < 0 or length < 1 or start + length > x.shape[axis]:
        raise DimensionError(
            f"narrow: slice [{start}, {start + length}) out of range for axis {axis} of extent {x.shape[axis]}"
        )
    index = tuple(slice(None) if ax != axis else slice(start, start + length) for ax in range(x.ndim))
    xshape = x.shape

    def fn(g):
        gx = np.zeros(xshape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return make_op("narrow", x.data[index], (x,), fn)


def reduce(op: str, x, axes: Iterable[int]) -> Tensor:
    """Sum or mean over an explicit axis set; empty set is the identity."""
    if op not in ("sum", "mean"):
        raise ContractError(f"reduce: unknown op {op!r}")
    x = _as_tensor(x)
    axes = _check_axes("reduce", axes, x.ndim)
    if not axes:
        return x
    n = int(np.prod([x.shape[ax] for ax in axes], dtype=np.int64))
    out = x.data.sum(axis=axes)
    if op == "mean":
        out = out / x.dtype.type(n)
    kept = tuple(1 if ax in axes else s for ax, s in enumerate(x.shape))
    xshape, xdtype = x.shape, x.dtype

    def fn(g):
        g = g.reshape(kept)
        if op == "mean":
            g = g / xdtype.type(n)
        return (np.broadcast_to(g, xshape).copy(),)

    return make_op(op, out, (x,), fn)


def reduce_sum(x, axes: Iterable[int] | None = None) -> Tensor:
    x = _as_tensor(x)
    return reduce("sum", x, range(x.ndim) if axes is None else axes)


def reduce_mean(x, axes: Iterable[int] | None = None) -> Tensor:
    x = _as_tensor(x)
    return reduce("mean", x, range(x.ndim) if axes is None else axes)


# ---------------------------------------------------------------------------
# convolution

def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation convolution of [N,C,H,W] with [O,C,kh,kw] kernels."""
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be [N,C,H,W], got {x.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be [O,C,kh,kw], got {kernel.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(
            f"conv2d: channel axis 1 mismatch (input has {c} channels, kernel expects {ck})"
        )
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} with stride {stride}, padding {padding} "
            f"does not fit input spatial axes 2x3 of {h}x{w}"
        )
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise DimensionError(f"conv2d: bias must have shape ({o},), got {bias.shape}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = np.ascontiguousarray(x.data)
    cols = backend.im2col(xp, kh, kw, stride, ho, wo)
    cols2 = cols.reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(o, c * kh * kw)
    out2 = cols2 @ kmat.T
    if bias is not None:
        out2 += bias.data
    out = np.ascontiguousarray(out2.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    hp, wp = h + 2 * padding, w + 2 * padding
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def fn(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        gk = (g2.T @ cols2).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(n, ho, wo, c, kh, kw)
            gxp = backend.col2im_add(dcols, stride, hp, wp)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        if bias is None:
            return gx, gk
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gk, gb

    return make_op("conv2d", out, inputs, fn)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_probes: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare the tape gradient of scalar f against central differences.

    Runs in float64 regardless of x's dtype. Returns the maximum over
    checked elements of |analytic - numeric| / max(|analytic|, |numeric|,
    1e-8). With ``max_probes`` set, a random subset of elements is probed
    (all elements otherwise); the analytic gradient is always complete.
    """
    base = np.asarray(x.data, dtype=np.float64)

    with ComputationTape(check_finite=True):
        xv = Tensor(base.copy(), requires_grad=True)
        out = f(xv)
        if not isinstance(out, Tensor) or out.size != 1:
            raise ContractError("grad_check: f must return a scalar tensor")
        backward(out)
        analytic = np.zeros_like(base) if xv.grad is None else np.asarray(xv.grad, dtype=np.float64)

    def probe(flat_idx: int) -> float:
        bumped = base.copy().reshape(-1)
        bumped[flat_idx] += eps
        with ComputationTape(check_finite=True):
            hi = f(Tensor(bumped.reshape(base.shape))).item()
        bumped[flat_idx] -= 2 * eps
        with ComputationTape(check_finite=True):
            lo = f(Tensor(bumped.reshape(base.shape))).item()
        return (hi - lo) / (2 * eps)

    if max_probes is not None and max_probes < base.size:
        gen = rng if rng is not None else np.random.default_rng(0)
        indices = gen.choice(base.size, size=max_probes, replace=False)
    else:
        indices = np.arange(base.size)

    flat_analytic = analytic.reshape(-1)
    worst = 0.0
    for idx in indices:
        numeric = probe(int(idx))
        a = flat_analytic[int(idx)]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
