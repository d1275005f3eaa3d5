"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Every forward op checks whether a tape is active and whether any operand
requires a gradient; if so it appends a record holding a closure that maps
the output gradient to operand gradients.  ``backward`` replays the records
in reverse order.  Leaf tensors (parameters, inputs) accumulate into
``Tensor.grad``; intermediate gradients live only inside the replay.

Shapes are never broadcast implicitly.  Ops that combine a row vector with a
batch (``linear``, ``add_row``) or two sequences (``outer_add``) say so in
their names.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An op was called outside its contract (e.g. backward on a vector)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar for the common elementwise ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class Parameter:
    """A named model tensor; ``trainable=False`` keeps the optimizer away."""

    name: str
    tensor: Tensor
    trainable: bool = True

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.tensor
    return Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable forward operations."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    def release(self) -> None:
        """Drop the records.  Tensors point back at their tape, so without
        this the graph lives until the cyclic collector happens to run."""
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1 or loss.data.ndim > 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(r.output) for r in self.records}
        if id(loss) not in produced:
            if loss.requires_grad:
                _accumulate_leaf(loss, grads[id(loss)])
            return
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            in_grads = rec.backward(g_out)
            for t, g in zip(rec.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                if g.shape != t.data.shape:
                    raise DimensionError(
                        f"internal: gradient shape {g.shape} != operand shape {t.data.shape}"
                    )
                if id(t) in produced:
                    prev = grads.get(id(t))
                    grads[id(t)] = g if prev is None else prev + g
                else:
                    _accumulate_leaf(t, g)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad = t.grad + g


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Evaluate without recording (inference)."""
    saved = list(_TAPE_STACK)
    _TAPE_STACK.clear()
    try:
        yield
    finally:
        _TAPE_STACK.extend(saved)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from ``loss``."""
    if loss.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not produced under an active tape")
    tape.backward(loss)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._tape = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.records.append(_Record(out, inputs, bwd))
    else:
        out.requires_grad = False
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product.  ``a`` may carry leading batch axes ``[..., m, k]``;
    ``b`` is either ``[k, n]`` or has exactly the same leading axes as ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 2:
        raise DimensionError(f"matmul: need a [...,m,k] and b [...,k,n], got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ for {a.shape} and {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def bwd(g):
        if B.ndim == 2:
            ga = g @ B.T
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ np.swapaxes(B, -1, -2)
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _emit(out, (a, b), bwd)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``b`` a row vector added to every row of the result."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0] or w.data.ndim != 2:
        raise DimensionError(f"linear: input {x.shape} does not fit weight {w.shape}")
    X, W = x.data, w.data
    out = X @ W
    inputs: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} does not fit weight {w.shape}")
        out = out + b.data
        inputs = (x, w, b)

    def bwd(g):
        gx = g @ W.T
        g2 = g.reshape(-1, g.shape[-1])
        gw = X.reshape(-1, X.shape[-1]).T @ g2
        if len(inputs) == 3:
            return gx, gw, _row_sum(g2)
        return gx, gw

    return _emit(out, inputs, bwd)


def _row_sum(g2: np.ndarray) -> np.ndarray:
    # numpy's pairwise reduction has a fixed order for a given shape
    return np.sum(g2, axis=0)


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise DimensionError(f"transpose: need ndim >= 2, got {x.shape}")
    return _emit(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from e
    return _emit(out, (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    A, B = a.data, b.data
    return _emit(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def add_row(x, row) -> Tensor:
    """Add a vector of shape ``[n]`` to every trailing row of ``x [..., n]``."""
    x, row = as_tensor(x), as_tensor(row)
    if row.data.ndim != 1 or x.shape[-1] != row.shape[0]:
        raise DimensionError(f"add_row: {row.shape} does not fit {x.shape}")
    return _emit(x.data + row.data, (x, row), lambda g: (g, _row_sum(g.reshape(-1, g.shape[-1]))))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def bwd(g):
        d = y * y
        np.subtract(1.0, d, out=d)
        d *= g
        return (d,)

    return _emit(y, (x,), bwd)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free and one ufunc pass
    y = np.tanh(0.5 * z)
    y += 1.0
    y *= 0.5
    return y


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


_UNARY = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}
_BINARY = {"add": add, "mul": mul}


def elementwise(kind: str, *operands) -> Tensor:
    if kind in _UNARY:
        if len(operands) != 1:
            raise ContractError(f"{kind} takes one operand")
        return _UNARY[kind](operands[0])
    if kind in _BINARY:
        if len(operands) != 2:
            raise ContractError(f"{kind} takes two operands")
        return _BINARY[kind](*operands)
    raise ContractError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions, structure


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    total = np.sum(x.data)
    return _emit(np.array(total, dtype=DTYPE), (x,), lambda g: (np.full(shape, float(g), dtype=DTYPE),))


def dot(a, b) -> Tensor:
    """Scalar product of two equal-shape tensors."""
    return sum_all(mul(a, b))


def concat(a, b, axis: int = -1) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != b.data.ndim:
        raise DimensionError(f"concat: rank mismatch {a.shape} vs {b.shape}")
    ax = axis % a.data.ndim
    sa, sb = list(a.shape), list(b.shape)
    sa[ax] = sb[ax] = 0
    if sa != sb:
        raise DimensionError(f"concat: shapes {a.shape} and {b.shape} differ off axis {axis}")
    split = a.shape[ax]
    out = np.concatenate([a.data, b.data], axis=ax)

    def bwd(g):
        ga, gb = np.split(g, [split], axis=ax)
        return ga, gb

    return _emit(out, (a, b), bwd)


def take(x, index) -> Tensor:
    """Advanced indexing ``x[index]``; the backward pass scatter-adds."""
    x = as_tensor(x)
    shape = x.shape
    out = x.data[index]

    def bwd(g):
        gx = np.zeros(shape, dtype=DTYPE)
        np.add.at(gx, index, g)
        return (gx,)

    return _emit(np.array(out, dtype=DTYPE), (x,), bwd)


def embedding_lookup(table, ids) -> Tensor:
    """Row lookup; ``ids`` may be an int (returns ``[e]``) or an int array."""
    table = as_tensor(table)
    V = table.shape[0]
    arr = np.asarray(ids)
    if arr.size and (arr.min() < 0 or arr.max() >= V):
        bad = int(arr.reshape(-1)[np.argmax((arr.reshape(-1) < 0) | (arr.reshape(-1) >= V))])
        raise IndexError(f"embedding id {bad} out of range for table with V={V}")
    return take(table, arr if arr.ndim else int(arr))


def outer_add(a, b) -> Tensor:
    """``a [B,T,H]`` and ``b [B,U,H]`` -> ``[B,T,U,H]`` with ``out[:,t,u] = a[:,t] + b[:,u]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise DimensionError(f"outer_add: incompatible {a.shape} and {b.shape}")
    out = a.data[:, :, None, :] + b.data[:, None, :, :]
    return _emit(out, (a, b), lambda g: (g.sum(axis=2), g.sum(axis=1)))


# ---------------------------------------------------------------------------
# normalizers


def _softmax_np(z: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax(x, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (bool, same shape) drops entries."""
    x = as_tensor(x)
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax: empty input")
    y = _softmax_np(x.data, mask)

    def bwd(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _emit(y, (x,), bwd)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("log_softmax: empty input")
    z = x.data
    m = np.max(z, axis=-1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))
    y = z - lse

    def bwd(g):
        return (g - np.exp(y) * np.sum(g, axis=-1, keepdims=True),)

    return _emit(y, (x,), bwd)


# ---------------------------------------------------------------------------
# recurrent primitive


def lstm_step_np(x_pre: np.ndarray, h: np.ndarray, c: np.ndarray, w_hh: np.ndarray):
    """One cell update given the input pre-activation ``x @ W_ih + b``.

    Gate blocks are ordered (input, forget, cell, output).
    """
    H = h.shape[-1]
    z = x_pre + h @ w_hh
    s = _sigmoid(z)
    i, f, o = s[..., :H], s[..., H : 2 * H], s[..., 3 * H :]
    g = np.tanh(z[..., 2 * H : 3 * H])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new, (i, f, g, o)


def lstm_sequence(x, w_ih, w_hh, b) -> Tensor:
    """Run one unidirectional LSTM layer over ``x [B,T,I]`` from zero state.

    Returns hidden states ``[B,T,H]``.  The whole unroll is a single tape
    record with a hand-written backward-through-time pass.
    """
    x, w_ih, w_hh, b = map(as_tensor, (x, w_ih, w_hh, b))
    X, Wx, Wh, bb = x.data, w_ih.data, w_hh.data, b.data
    if X.ndim != 3:
        raise DimensionError(f"lstm_sequence: input must be [B,T,I], got {X.shape}")
    Bn, T, I = X.shape
    H = Wh.shape[0]
    if Wx.shape != (I, 4 * H) or Wh.shape != (H, 4 * H) or bb.shape != (4 * H,):
        raise DimensionError(
            f"lstm_sequence: weights {Wx.shape}, {Wh.shape}, {bb.shape} do not fit input size {I}"
        )
    pre = X @ Wx + bb
    hs = np.zeros((Bn, T + 1, H), dtype=DTYPE)
    cs = np.zeros((Bn, T + 1, H), dtype=DTYPE)
    gates = np.zeros((Bn, T, 4, H), dtype=DTYPE)
    for t in range(T):
        h, c, (i, f, g, o) = lstm_step_np(pre[:, t], hs[:, t], cs[:, t], Wh)
        hs[:, t + 1] = h
        cs[:, t + 1] = c
        gates[:, t, 0], gates[:, t, 1], gates[:, t, 2], gates[:, t, 3] = i, f, g, o

    def bwd(gH):
        i, f, g, o = gates[:, :, 0], gates[:, :, 1], gates[:, :, 2], gates[:, :, 3]
        tc = np.tanh(cs[:, 1:])
        # per-step local derivatives, vectorised over time
        dc_from_h = o * (1.0 - tc * tc)
        coef = np.concatenate([g * i * (1.0 - i), cs[:, :T] * f * (1.0 - f), i * (1.0 - g * g),
                               tc * o * (1.0 - o)], axis=2)
        dpre = np.empty((Bn, T, 4 * H), dtype=DTYPE)
        dh_next = np.zeros((Bn, H), dtype=DTYPE)
        dc_next = np.zeros((Bn, H), dtype=DTYPE)
        WhT = Wh.T.copy()
        for t in range(T - 1, -1, -1):
            dh = gH[:, t] + dh_next
            dc = dh * dc_from_h[:, t] + dc_next
            dz = dpre[:, t]
            dz[:, : 3 * H] = np.tile(dc, 3)
            dz[:, 3 * H :] = dh
            dz *= coef[:, t]
            dc_next = dc * f[:, t]
            dh_next = dz @ WhT
        dX = dpre @ Wx.T
        d2 = dpre.reshape(-1, 4 * H)
        dWh = hs[:, :T].reshape(-1, H).T @ d2
        dWx = X.reshape(-1, I).T @ d2
        return dX, dWx, dWh, _row_sum(d2)

    return _emit(hs[:, 1:].copy(), (x, w_ih, w_hh, b), bwd)
