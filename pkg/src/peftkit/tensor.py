"""Dense float64 tensors with tape-based reverse-mode autodiff.

Design notes:

* Data lives in flat ``array('d')`` buffers (row-major); the numeric
  work is delegated to the selected kernel backend.
* Define-by-run: while a :class:`Tape` is active on the current thread,
  every primitive whose output requires grad appends a backward record.
  ``Tape.backward`` replays the records in exact reverse execution
  order, accumulating gradients additively.
* No implicit broadcasting. The only scalar broadcast is ``scale``;
  row-wise vector application goes through the explicit ``row_add`` /
  ``row_mul`` primitives.

Tensors are value-semantic and movable between threads; a tape and the
tensors recorded on it belong to one thread at a time. Independent
tapes may run concurrently.
"""

from __future__ import annotations

import random
import threading
from array import array
from typing import Callable, Iterable, Sequence

from peftkit.backend import kernels as K
from peftkit.errors import (
    ContractError,
    DimensionError,
    DomainError,
    RankError,
)

Shape = tuple[int, ...]

LAYERNORM_EPS = 1e-12


def _numel(shape: Shape) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


class Tensor:
    """A dense float64 value participating in reverse-mode autodiff."""

    __slots__ = ("shape", "data", "requires_grad", "grad")

    def __init__(self, shape, data=None, requires_grad: bool = False):
        shape = tuple(int(d) for d in shape)
        for d in shape:
            if d <= 0:
                raise DimensionError(f"tensor extents must be positive, got {shape}")
        n = _numel(shape)
        if data is None:
            data = array("d", bytes(8 * n))
        elif not isinstance(data, array) or data.typecode != "d":
            data = array("d", data)
        if len(data) != n:
            raise DimensionError(
                f"shape {shape} implies {n} values, got {len(data)}"
            )
        self.shape = shape
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None

    # -- inspection ----------------------------------------------------

    @property
    def numel(self) -> int:
        return len(self.data)

    def item(self) -> float:
        if len(self.data) != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return self.data[0]

    def tolist(self):
        """Nested lists following the shape (rank 0, 1, or 2)."""
        if len(self.shape) == 0:
            return self.data[0]
        if len(self.shape) == 1:
            return list(self.data)
        if len(self.shape) == 2:
            r, c = self.shape
            return [list(self.data[i * c:(i + 1) * c]) for i in range(r)]
        raise RankError(f"tolist() supports rank <= 2, got shape {self.shape}")

    def tobytes(self) -> bytes:
        return self.data.tobytes()

    def copy(self, requires_grad=None) -> Tensor:
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.shape, array("d", self.data), requires_grad=rg)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# -- constructors ------------------------------------------------------

def scalar(value: float, requires_grad: bool = False) -> Tensor:
    return Tensor((), array("d", [float(value)]), requires_grad=requires_grad)


def vector(values: Iterable[float], requires_grad: bool = False) -> Tensor:
    data = array("d", (float(v) for v in values))
    return Tensor((len(data),), data, requires_grad=requires_grad)


def matrix(rows: Sequence[Sequence[float]], requires_grad: bool = False) -> Tensor:
    r = len(rows)
    c = len(rows[0])
    data = array("d", bytes(8 * r * c))
    for i, row in enumerate(rows):
        if len(row) != c:
            raise DimensionError("ragged rows in matrix()")
        for j, v in enumerate(row):
            data[i * c + j] = float(v)
    return Tensor((r, c), data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(shape, requires_grad=requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    n = _numel(tuple(shape))
    return Tensor(shape, array("d", [float(value)] * n), requires_grad=requires_grad)


def uniform(shape, rng: random.Random, bound: float,
            requires_grad: bool = False) -> Tensor:
    n = _numel(tuple(shape))
    data = array("d", bytes(8 * n))
    for i in range(n):
        data[i] = rng.uniform(-bound, bound)
    return Tensor(shape, data, requires_grad=requires_grad)


def identity(n: int) -> Tensor:
    t = Tensor((n, n))
    for i in range(n):
        t.data[i * n + i] = 1.0
    return t


# -- tape --------------------------------------------------------------

_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives, replayed in reverse.

    A tensor consumed by k recorded operations receives the sum of the
    k gradient contributions. Tensors that were recorded but do not
    reach the loss end up with zero gradient.
    """

    def __init__(self):
        self._records: list[Callable[[], None]] = []
        self._tracked: dict[int, Tensor] = {}
        self._replayed = False

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape stack corrupted: exiting a non-innermost tape")
        stack.pop()
        return False

    def record(self, fn: Callable[[], None], *tensors: Tensor) -> None:
        self._records.append(fn)
        for t in tensors:
            if t.requires_grad:
                self._tracked.setdefault(id(t), t)

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and propagate to every recorded tensor."""
        if loss.numel != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        if not self._records:
            raise ContractError("backward on an empty tape")
        if self._replayed:
            raise ContractError(
                "tape already replayed; a second backward would "
                "double-accumulate gradients"
            )
        self._replayed = True
        loss.grad = array("d", [1.0])
        for fn in reversed(self._records):
            fn()
        for t in self._tracked.values():
            if t.grad is None:
                t.grad = array("d", bytes(8 * t.numel))


def backward(loss: Tensor) -> None:
    """Run the backward pass of the innermost active tape."""
    tape = active_tape()
    if tape is None:
        raise ContractError("backward() requires an active Tape")
    tape.backward(loss)


def _accum(t: Tensor, delta) -> None:
    if t.grad is None:
        t.grad = array("d", delta)
    else:
        K.acc(t.grad, delta, len(delta))


def _maybe_record(out: Tensor, fn: Callable[[], None], *inputs: Tensor) -> None:
    if not out.requires_grad:
        return
    tape = active_tape()
    if tape is not None:
        tape.record(fn, out, *inputs)


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


# -- shape guards ------------------------------------------------------

def _require_rank2(t: Tensor, op: str) -> None:
    if len(t.shape) != 2:
        raise RankError(f"{op} requires a matrix, got shape {t.shape}")


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape {a.shape} vs {b.shape}")


# -- primitives --------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    out = Tensor(a.shape, K.ew_add(a.data, b.data, a.numel),
                 requires_grad=_needs_grad(a, b))

    def bw():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    _maybe_record(out, bw, a, b)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    out = Tensor(a.shape, K.ew_sub(a.data, b.data, a.numel),
                 requires_grad=_needs_grad(a, b))

    def bw():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, K.ew_scale(g, -1.0, len(g)))

    _maybe_record(out, bw, a, b)
    return out


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "hadamard")
    out = Tensor(a.shape, K.ew_mul(a.data, b.data, a.numel),
                 requires_grad=_needs_grad(a, b))

    def bw():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, K.ew_mul(g, b.data, len(g)))
        if b.requires_grad:
            _accum(b, K.ew_mul(g, a.data, len(g)))

    _maybe_record(out, bw, a, b)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """Scalar scale, the only permitted broadcast."""
    c = float(c)
    out = Tensor(a.shape, K.ew_scale(a.data, c, a.numel),
                 requires_grad=a.requires_grad)

    def bw():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, K.ew_scale(g, c, len(g)))

    _maybe_record(out, bw, a)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_rank2(a, "matmul")
    _require_rank2(b, "matmul")
    m, ka = a.shape
    kb, n = b.shape
    if ka != kb:
        raise DimensionError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    out = Tensor((m, n), K.matmul(a.data, b.data, m, ka, n),
                 requires_grad=_needs_grad(a, b))

    def bw():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, K.matmul_nt(g, b.data, m, n, ka))
        if b.requires_grad:
            _accum(b, K.matmul_tn(a.data, g, m, ka, n))

    _maybe_record(out, bw, a, b)
    return out


def kron(a: Tensor, b: Tensor) -> Tensor:
    """Kronecker product: out[i*r+x, j*s+y] = a[i,j] * b[x,y].

    Entries are single products, so the result is exact (no reduction
    reordering is possible by construction).
    """
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise RankError(
            f"kron requires two matrices, got shapes {a.shape} and {b.shape}"
        )
    p, q = a.shape
    r, s = b.shape
    out = Tensor((p * r, q * s), K.kron(a.data, b.data, p, q, r, s),
                 requires_grad=_needs_grad(a, b))

    def bw():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, K.kron_grad_a(g, b.data, p, q, r, s))
        if b.requires_grad:
            _accum(b, K.kron_grad_b(g, a.data, p, q, r, s))

    _maybe_record(out, bw, a, b)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(x.shape, K.relu(x.data, x.numel), requires_grad=x.requires_grad)

    def bw():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            _accum(x, K.relu_grad(g, x.data, len(g)))

    _maybe_record(out, bw, x)
    return out


def tanh(x: Tensor) -> Tensor:
    out = Tensor(x.shape, K.tanh(x.data, x.numel), requires_grad=x.requires_grad)

    def bw():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            _accum(x, K.tanh_grad(g, out.data, len(g)))

    _maybe_record(out, bw, x)
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis of a matrix (row-wise)."""
    _require_rank2(x, "softmax")
    rows, cols = x.shape
    if cols == 0:
        raise DomainError("softmax over an empty axis")
    out = Tensor(x.shape, K.softmax_rows(x.data, rows, cols),
                 requires_grad=x.requires_grad)

    def bw():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            _accum(x, K.softmax_rows_grad(g, out.data, rows, cols))

    _maybe_record(out, bw, x)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor,
               eps: float = LAYERNORM_EPS) -> Tensor:
    """Row-wise normalization to mean 0 / variance 1, then affine."""
    _require_rank2(x, "layer_norm")
    rows, cols = x.shape
    if gain.shape != (cols,) or bias.shape != (cols,):
        raise DimensionError(
            f"layer_norm: x {x.shape} needs gain/bias of shape ({cols},), "
            f"got {gain.shape} and {bias.shape}"
        )
    y, xhat, rstd = K.layernorm_rows(x.data, gain.data, bias.data, rows, cols, eps)
    out = Tensor(x.shape, y, requires_grad=_needs_grad(x, gain, bias))

    def bw():
        g = out.grad
        if g is None:
            return
        dx, dgain, dbias = K.layernorm_rows_grad(g, gain.data, xhat, rstd, rows, cols)
        if x.requires_grad:
            _accum(x, dx)
        if gain.requires_grad:
            _accum(gain, dgain)
        if bias.requires_grad:
            _accum(bias, dbias)

    _maybe_record(out, bw, x, gain, bias)
    return out


def row_mul(x: Tensor, v: Tensor) -> Tensor:
    """Multiply every row of x elementwise by the vector v."""
    _require_rank2(x, "row_mul")
    rows, cols = x.shape
    if v.shape != (cols,):
        raise DimensionError(f"row_mul: x {x.shape} vs vector {v.shape}")
    out = Tensor(x.shape, K.row_mul(x.data, v.data, rows, cols),
                 requires_grad=_needs_grad(x, v))

    def bw():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            _accum(x, K.row_mul(g, v.data, rows, cols))
        if v.requires_grad:
            _accum(v, K.row_mul_grad_v(g, x.data, rows, cols))

    _maybe_record(out, bw, x, v)
    return out


def row_add(x: Tensor, v: Tensor) -> Tensor:
    """Add the vector v to every row of x."""
    _require_rank2(x, "row_add")
    rows, cols = x.shape
    if v.shape != (cols,):
        raise DimensionError(f"row_add: x {x.shape} vs vector {v.shape}")
    out = Tensor(x.shape, K.row_add(x.data, v.data, rows, cols),
                 requires_grad=_needs_grad(x, v))

    def bw():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            _accum(x, g)
        if v.requires_grad:
            _accum(v, K.col_sum(g, rows, cols))

    _maybe_record(out, bw, x, v)
    return out


def transpose(x: Tensor) -> Tensor:
    _require_rank2(x, "transpose")
    rows, cols = x.shape
    out = Tensor((cols, rows), K.transpose(x.data, rows, cols),
                 requires_grad=x.requires_grad)

    def bw():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            _accum(x, K.transpose(g, cols, rows))

    _maybe_record(out, bw, x)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor((), array("d", [K.sum_all(x.data, x.numel)]),
                 requires_grad=x.requires_grad)

    def bw():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            _accum(x, array("d", [g[0]]) * x.numel)

    _maybe_record(out, bw, x)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate matrices along axis 0 or 1."""
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    for t in tensors:
        _require_rank2(t, "concat")
    if axis == 0:
        cols = tensors[0].shape[1]
        for t in tensors:
            if t.shape[1] != cols:
                raise DimensionError(
                    f"concat axis=0: column counts differ, "
                    f"{[t.shape for t in tensors]}"
                )
        data = array("d", [])
        for t in tensors:
            data.extend(t.data)
        rows = sum(t.shape[0] for t in tensors)
        out = Tensor((rows, cols), data,
                     requires_grad=_needs_grad(*tensors))

        def bw():
            g = out.grad
            if g is None:
                return
            r0 = 0
            for t in tensors:
                r = t.shape[0]
                if t.requires_grad:
                    _accum(t, g[r0 * cols:(r0 + r) * cols])
                r0 += r

        _maybe_record(out, bw, *tensors)
        return out
    if axis == 1:
        rows = tensors[0].shape[0]
        for t in tensors:
            if t.shape[0] != rows:
                raise DimensionError(
                    f"concat axis=1: row counts differ, "
                    f"{[t.shape for t in tensors]}"
                )
        cols = sum(t.shape[1] for t in tensors)
        data = array("d", bytes(8 * rows * cols))
        c0 = 0
        for t in tensors:
            c = t.shape[1]
            for i in range(rows):
                data[i * cols + c0:i * cols + c0 + c] = t.data[i * c:(i + 1) * c]
            c0 += c
        out = Tensor((rows, cols), data, requires_grad=_needs_grad(*tensors))

        def bw():
            g = out.grad
            if g is None:
                return
            c0 = 0
            for t in tensors:
                c = t.shape[1]
                if t.requires_grad:
                    piece = array("d", bytes(8 * rows * c))
                    for i in range(rows):
                        piece[i * c:(i + 1) * c] = g[i * cols + c0:i * cols + c0 + c]
                    _accum(t, piece)
                c0 += c

        _maybe_record(out, bw, *tensors)
        return out
    raise DimensionError(f"concat supports axis 0 or 1, got {axis}")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    _require_rank2(x, "slice_rows")
    rows, cols = x.shape
    if not (0 <= start < stop <= rows):
        raise DimensionError(f"slice_rows[{start}:{stop}] out of range for {x.shape}")
    out = Tensor((stop - start, cols), x.data[start * cols:stop * cols],
                 requires_grad=x.requires_grad)

    def bw():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            delta = array("d", bytes(8 * rows * cols))
            delta[start * cols:stop * cols] = g
            _accum(x, delta)

    _maybe_record(out, bw, x)
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _require_rank2(x, "slice_cols")
    rows, cols = x.shape
    if not (0 <= start < stop <= cols):
        raise DimensionError(f"slice_cols[{start}:{stop}] out of range for {x.shape}")
    width = stop - start
    data = array("d", bytes(8 * rows * width))
    for i in range(rows):
        data[i * width:(i + 1) * width] = x.data[i * cols + start:i * cols + stop]
    out = Tensor((rows, width), data, requires_grad=x.requires_grad)

    def bw():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            delta = array("d", bytes(8 * rows * cols))
            for i in range(rows):
                delta[i * cols + start:i * cols + stop] = g[i * width:(i + 1) * width]
            _accum(x, delta)

    _maybe_record(out, bw, x)
    return out


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if axis == 0:
        return slice_rows(x, start, stop)
    if axis == 1:
        return slice_cols(x, start, stop)
    raise DimensionError(f"slice_axis supports axis 0 or 1, got {axis}")


def gather(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Select rows of a matrix by index (embedding lookup)."""
    _require_rank2(table, "gather")
    rows, cols = table.shape
    ids = list(int(i) for i in ids)
    for i in ids:
        if not (0 <= i < rows):
            raise DimensionError(f"gather index {i} out of range for {table.shape}")
    idbuf = array("q", ids)
    out = Tensor((len(ids), cols), K.gather_rows(table.data, idbuf, len(ids), cols),
                 requires_grad=table.requires_grad)

    def bw():
        g = out.grad
        if g is None:
            return
        if table.requires_grad:
            _accum(table, K.scatter_add_rows(g, idbuf, len(ids), rows, cols))

    _maybe_record(out, bw, table)
    return out


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean cross-entropy of row-wise class logits against integer targets."""
    _require_rank2(logits, "cross_entropy")
    rows, cols = logits.shape
    targets = list(int(t) for t in targets)
    if len(targets) != rows:
        raise DimensionError(
            f"cross_entropy: {rows} logit rows vs {len(targets)} targets"
        )
    for t in targets:
        if not (0 <= t < cols):
            raise DomainError(f"target id {t} outside [0, {cols})")
    tbuf = array("q", targets)
    loss, probs = K.cross_entropy_rows(logits.data, tbuf, rows, cols)
    out = Tensor((), array("d", [loss]), requires_grad=logits.requires_grad)

    def bw():
        g = out.grad
        if g is None:
            return
        if logits.requires_grad:
            _accum(logits, K.cross_entropy_grad(probs, tbuf, rows, cols,
                                                g[0] / rows))

    _maybe_record(out, bw, logits)
    return out
