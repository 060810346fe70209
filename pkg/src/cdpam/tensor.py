"""Dense float64 tensors with recorded-operation reverse-mode differentiation.

A Tensor wraps a numpy array and, when gradients are requested, remembers the
operation that produced it as a backward closure over its parents.  Calling
``backward()`` on a scalar root walks the recorded graph in reverse
topological order and accumulates gradients into every reachable tensor that
requires them; fan-out sums naturally because closures add into ``.grad``.

Every operation validates that its output is finite (NaN/Inf raises
:class:`NumericError`), which is what lets training abort on divergence
instead of silently continuing.

conv1d is implemented as a chunked im2col + one GEMM per chunk; that keeps
the working set bounded while letting BLAS do the heavy lifting, which
matters because everything here runs on the CPU in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateInputError, NumericError, ShapeError

_COL_BUDGET = 4_000_000  # doubles per im2col chunk (~32 MB)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {op}")


class Tensor:
    """N-dimensional float64 value participating in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward_fn=None, _op="tensor"):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, _op)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode pass from a scalar root; gradients sum over fan-out."""
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar root, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(data, parents, backward_fn, op):
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward_fn=backward_fn, _op=op)


# -- elementwise ops --------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(x.data)

    def backward(g):
        x._accumulate(g * out_data)

    return _make(out_data, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(x.data)

    def backward(g):
        x._accumulate(g / x.data)

    return _make(out_data, (x,), backward, "log")


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out_data = np.sqrt(x.data)

    def backward(g):
        x._accumulate(g * 0.5 / out_data)

    return _make(out_data, (x,), backward, "sqrt")


def absolute(x: Tensor) -> Tensor:
    out_data = np.abs(x.data)

    def backward(g):
        x._accumulate(g * np.sign(x.data))

    return _make(out_data, (x,), backward, "abs")


def clamp(x: Tensor, lo: float | None, hi: float | None) -> Tensor:
    out_data = np.clip(x.data, lo, hi)

    def backward(g):
        inside = np.ones_like(x.data, dtype=bool)
        if lo is not None:
            inside &= x.data >= lo
        if hi is not None:
            inside &= x.data <= hi
        x._accumulate(g * inside)

    return _make(out_data, (x,), backward, "clamp")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    out_data = np.where(x.data > 0.0, x.data, slope * x.data)

    def backward(g):
        x._accumulate(g * np.where(x.data > 0.0, 1.0, slope))

    return _make(out_data, (x,), backward, "leaky_relu")


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, slope=0.0)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out_data = np.where(d >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward(g):
        x._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward, "sigmoid")


# -- reductions and shape ops ------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        x._accumulate(np.broadcast_to(gg, x.shape).copy())

    return _make(out_data, (x,), backward, "sum")


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= x.shape[ax]
    return mul(sum_(x, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


def concat0(parts: list[Tensor]) -> Tensor:
    out_data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]

    def backward(g):
        start = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                p._accumulate(g[start:start + n])
            start += n

    return _make(out_data, tuple(parts), backward, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out_data = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        x._accumulate(gx)

    return _make(out_data, (x,), backward, "narrow")


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _make(out_data, (x,), backward, "reshape")


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("transpose2d expects a 2-D tensor")
    out_data = x.data.T.copy()

    def backward(g):
        x._accumulate(g.T)

    return _make(out_data, (x,), backward, "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D tensors")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), backward, "matmul")


# -- neural-network layers ----------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[batch, d_in] @ w[d_out, d_in]^T + b."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear shape mismatch x{x.shape} w{w.shape}")
    out_data = x.data @ w.data.T
    if b is not None:
        out_data = out_data + b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data)
        if w.requires_grad:
            w._accumulate(g.T @ x.data)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, backward, "linear")


def _conv_chunks(cin: int, k: int, batch: int, out_len: int):
    per_t = max(1, cin * k * batch)
    step = max(1, _COL_BUDGET // per_t)
    for t0 in range(0, out_len, step):
        yield t0, min(out_len, t0 + step)


def _conv_col(xp: np.ndarray, k: int, stride: int, t0: int, t1: int) -> np.ndarray:
    # columns of the (Cin*K, B*(t1-t0)) im2col block for output positions [t0, t1)
    win = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    block = win[:, :, t0:t1, :]
    b, cin, tc, _ = block.shape
    return np.ascontiguousarray(block.transpose(1, 3, 0, 2)).reshape(cin * k, b * tc)


def _conv1d_forward(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    batch, cin, length = x.shape
    cout, _, k = w.shape
    pad = (k - 1) // 2
    out_len = length // stride
    xp = np.zeros((batch, cin, length + 2 * pad))
    xp[:, :, pad:pad + length] = x
    w2 = w.reshape(cout, cin * k)
    out = np.empty((batch, cout, out_len))
    for t0, t1 in _conv_chunks(cin, k, batch, out_len):
        col = _conv_col(xp, k, stride, t0, t1)
        y = w2 @ col
        out[:, :, t0:t1] = y.reshape(cout, batch, t1 - t0).transpose(1, 0, 2)
    return out


def _conv1d_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int,
                     need_dx: bool, need_dw: bool):
    batch, cin, length = x.shape
    cout, _, k = w.shape
    pad = (k - 1) // 2
    out_len = length // stride
    xp = np.zeros((batch, cin, length + 2 * pad))
    xp[:, :, pad:pad + length] = x
    w2 = w.reshape(cout, cin * k)
    dw2 = np.zeros((cout, cin * k)) if need_dw else None
    dxp = np.zeros_like(xp) if need_dx else None
    for t0, t1 in _conv_chunks(cin, k, batch, out_len):
        tc = t1 - t0
        gc = np.ascontiguousarray(g[:, :, t0:t1].transpose(1, 0, 2)).reshape(cout, batch * tc)
        if need_dw:
            col = _conv_col(xp, k, stride, t0, t1)
            dw2 += gc @ col.T
        if need_dx:
            gcol = (w2.T @ gc).reshape(cin, k, batch, tc).transpose(2, 0, 1, 3)
            for j in range(k):
                dxp[:, :, j + stride * t0: j + stride * t1: stride] += gcol[:, :, j, :]
    dx = dxp[:, :, pad:pad + length] if need_dx else None
    dw = dw2.reshape(cout, cin, k) if need_dw else None
    return dx, dw


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation with "same" framing: out[b,o,t] = sum x[b,c,t*stride+j-pad] w[o,c,j].

    Requires an odd kernel, stride 1 or 2, and a length divisible by the
    stride; output length is len/stride.
    """
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError("conv1d expects x[batch, ch, len] and w[out, ch, k]")
    batch, cin, length = x.shape
    cout, cin_w, k = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv1d channel mismatch: x has {cin}, w expects {cin_w}")
    if k % 2 == 0:
        raise ShapeError(f"conv1d kernel must be odd, got {k}")
    if stride not in (1, 2):
        raise ShapeError(f"conv1d stride must be 1 or 2, got {stride}")
    if length % stride != 0:
        raise ShapeError(f"conv1d length {length} not divisible by stride {stride}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv1d bias must have shape ({cout},)")

    out_data = _conv1d_forward(x.data, w.data, stride)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None]

    def backward(g):
        dx, dw = _conv1d_backward(g, x.data, w.data, stride, x.requires_grad, w.requires_grad)
        if x.requires_grad:
            x._accumulate(dx)
        if w.requires_grad:
            w._accumulate(dw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out_data, parents, backward, "conv1d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the temporal axis of x[batch, ch, len] -> [batch, ch]."""
    if x.data.ndim != 3:
        raise ShapeError("global_avg_pool expects x[batch, ch, len]")
    length = x.shape[2]
    out_data = x.data.mean(axis=2)

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, :, None] / length, x.shape).copy())

    return _make(out_data, (x,), backward, "global_avg_pool")


def batch_norm1d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running_mean: np.ndarray, running_var: np.ndarray,
                 train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm over (batch, time) for x[batch, ch, len].

    In training mode the batch statistics normalize the batch and update the
    running statistics in place (biased variance, momentum 0.1); in inference
    mode the running statistics are used and never touched.
    """
    if x.data.ndim != 3:
        raise ShapeError("batch_norm1d expects x[batch, ch, len]")
    ch = x.shape[1]
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise ShapeError("batch_norm1d gamma/beta must be per-channel vectors")

    if train:
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None]) * inv_std[None, :, None]
    out_data = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None]
            if train:
                n = x.shape[0] * x.shape[2]
                centered = x.data - mu[None, :, None]
                dvar = (dxhat * centered).sum(axis=(0, 2)) * (-0.5) * inv_std ** 3
                dmu = -dxhat.sum(axis=(0, 2)) * inv_std + dvar * (-2.0 / n) * centered.sum(axis=(0, 2))
                dx = (dxhat * inv_std[None, :, None]
                      + dvar[None, :, None] * 2.0 * centered / n
                      + dmu[None, :, None] / n)
            else:
                dx = dxhat * inv_std[None, :, None]
            x._accumulate(dx)

    return _make(out_data, (x, gamma, beta), backward, "batch_norm1d")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """(a . b) / (|a| |b|) for 1-D tensors; raises on zero vectors."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity expects equal-length vectors, got {a.shape}, {b.shape}")
    if not np.any(a.data) or not np.any(b.data):
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    dot = sum_(mul(a, b))
    na = sqrt(sum_(mul(a, a)))
    nb = sqrt(sum_(mul(b, b)))
    return div(dot, mul(na, nb))


def normalize_rows(z: Tensor) -> Tensor:
    """Scale each row of z[batch, d] to unit L2 norm; raises on zero rows."""
    norms_sq = sum_(mul(z, z), axis=1, keepdims=True)
    if np.any(norms_sq.data <= 0.0):
        raise DegenerateInputError("cannot normalize a zero row")
    return div(z, sqrt(norms_sq))


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter for Adam."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; pure function of (params, grads, state)."""
    new_params: dict = {}
    m = dict(state.first_moment)
    v = dict(state.second_moment)
    t = state.step_count + 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m_n = state.beta1 * m.get(name, np.zeros_like(p)) + (1.0 - state.beta1) * g
        v_n = state.beta2 * v.get(name, np.zeros_like(p)) + (1.0 - state.beta2) * g * g
        m_hat = m_n / (1.0 - state.beta1 ** t)
        v_hat = v_n / (1.0 - state.beta2 ** t)
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        m[name] = m_n
        v[name] = v_n
    new_state = AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
                          step_count=t, first_moment=m, second_moment=v)
    return new_params, new_state
