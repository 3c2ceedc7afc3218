"""Dense float64 tensors with taped reverse-mode differentiation.

Every forward op records its backward rule on an implicit tape (rebuilt per
forward pass, define-by-run).  ``backward(loss)`` replays the tape in reverse
and accumulates gradients into every ``requires_grad`` tensor reachable from
the loss.  Gradients accumulate across backward calls until explicitly
cleared, which is what the training loop relies on for per-shape gradient
accumulation.

Broadcasting is deliberately restricted to scalar-vs-array; all other
elementwise ops demand matching shapes.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class TapeError(RuntimeError):
    """Raised on invalid tape use (backward twice, loss not on a tape, ...)."""


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    Tensors are cheap wrappers: ``data`` is the value, ``grad`` (same shape,
    or None) is filled by ``backward``.  Leaves are created directly; results
    of ops carry a reference to the tape that recorded them.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same data with no gradient tracking."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Arithmetic sugar; the named ops below do the work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of forward ops; replayed once, in reverse, by backward."""

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._spent = False

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward_fn))
        out.tape = self

    def run_backward(self, loss: Tensor) -> None:
        if self._spent:
            raise TapeError("backward already called on this tape; run a new forward first")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
        self._spent = True
        loss.grad = np.ones_like(loss.data)
        for out, backward_fn in reversed(self._records):
            if out.grad is None:
                continue  # not on the path from the loss
            backward_fn(out.grad)
        self._records.clear()


_active_tape: Tape | None = None
_recording: bool = True


def _current_tape() -> Tape:
    """The live tape, starting a fresh one after each backward."""
    global _active_tape
    if _active_tape is None or _active_tape._spent:
        _active_tape = Tape()
    return _active_tape


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (e.g. for evaluation passes)."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from ``loss``."""
    if loss.tape is None:
        raise TapeError("loss was not produced on a tape (constant or recorded under no_grad)")
    loss.tape.run_backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Accumulate into t.grad; ``own=True`` promises g is a fresh array we may keep."""
    if t.grad is None:
        t.grad = g if own else np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _finish(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Attach the backward rule if recording and any input needs gradients."""
    if _recording and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _current_tape().record(out, backward_fn)
    return out


def _is_scalar(a: np.ndarray) -> bool:
    return a.size == 1


def _binary_shapes(name: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape and not (_is_scalar(a.data) or _is_scalar(b.data)):
        raise DimensionError(f"{name}: shapes {a.data.shape} and {b.data.shape} do not match "
                             "(only scalar-vs-array broadcasting is supported)")


def _accum_to(t: Tensor, fresh: np.ndarray) -> None:
    """Accumulate a freshly computed full-size gradient, reducing scalar operands."""
    if fresh.shape == t.data.shape:
        _accum(t, fresh, own=True)
    else:
        _accum(t, np.sum(fresh).reshape(t.data.shape), own=True)


# ---------------------------------------------------------------------------
# elementwise / scalar ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        # The upstream buffer g is dead after this record, so exactly one
        # matching-shape operand may adopt it outright.
        adopted = False
        if a.requires_grad:
            if g.shape == a.data.shape:
                _accum(a, g, own=True)
                adopted = True
            else:
                _accum(a, np.sum(g).reshape(a.data.shape), own=True)
        if b.requires_grad:
            if g.shape == b.data.shape:
                _accum(b, g.copy() if adopted else g, own=True)
            else:
                _accum(b, np.sum(g).reshape(b.data.shape), own=True)

    return _finish(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        if b.requires_grad:  # negate before a may adopt g
            _accum_to(b, -g)
        if a.requires_grad:
            if g.shape == a.data.shape:
                _accum(a, g, own=True)
            else:
                _accum(a, np.sum(g).reshape(a.data.shape), own=True)

    return _finish(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        if a.requires_grad:
            _accum_to(a, g * b.data)
        if b.requires_grad:
            _accum_to(b, g * a.data)

    return _finish(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("div", a, b)
    out = Tensor(a.data / b.data)

    def bwd(g):
        if a.requires_grad:
            _accum_to(a, g / b.data)
        if b.requires_grad:
            _accum_to(b, -g * a.data / (b.data * b.data))

    return _finish(out, (a, b), bwd)


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar constant (no gradient w.r.t. ``s``)."""
    a = _as_tensor(a)
    s = float(s)
    out = Tensor(a.data * s)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * s, own=True)

    return _finish(out, (a,), bwd)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    # slope where x <= 0, unit elsewhere; reused verbatim by the backward rule
    gain = np.where(a.data > 0, 1.0, slope)
    out = Tensor(a.data * gain)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * gain, own=True)

    return _finish(out, (a,), bwd)


def clamp_away_from_zero(a, eps: float) -> Tensor:
    """sign(x) * max(|x|, eps), with sign(0) taken as +1.

    Gradient is identity where |x| >= eps and zero where the clamp engages.
    """
    a = _as_tensor(a)
    sign = np.where(a.data < 0, -1.0, 1.0)
    keep = np.abs(a.data) >= eps
    out = Tensor(np.where(keep, a.data, sign * eps))

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.where(keep, g, 0.0), own=True)

    return _finish(out, (a,), bwd)


# ---------------------------------------------------------------------------
# structural ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul: expected 2-D operands, got {a.data.shape} x {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T, own=True)
        if b.requires_grad:
            _accum(b, a.data.T @ g, own=True)

    return _finish(out, (a, b), bwd)


def concat(tensors: Sequence, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: empty tensor list")
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(s[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)):
            raise DimensionError(f"concat: shape {s} incompatible with {ref} on axis {axis}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    extents = [t.data.shape[axis] for t in tensors]

    def bwd(g):
        offset = 0
        for t, ext in zip(tensors, extents):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + ext)
                _accum(t, g[tuple(sl)].copy(), own=True)
            offset += ext

    return _finish(out, tensors, bwd)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(a.data[sl].copy())

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[sl] = g
            _accum(a, full, own=True)

    return _finish(out, (a,), bwd)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.data.shape), own=True)  # adopts the dead upstream buffer

    return _finish(out, (a,), bwd)


def gather_cols(src, idx: np.ndarray) -> Tensor:
    """out[:, i, j] = src[:, idx[i, j]] for src of shape (f, N), idx of (N, k).

    Backward scatter-adds the upstream gradient into src; the indices carry
    no gradient.
    """
    src = _as_tensor(src)
    idx = np.asarray(idx)
    if src.data.ndim != 2 or idx.ndim != 2:
        raise DimensionError(f"gather_cols: need (f,N) source and (N,k) indices, "
                             f"got {src.data.shape} and {idx.shape}")
    n = src.data.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_cols: index out of range [0, {n})")
    out = Tensor(src.data[:, idx])

    def bwd(g):
        if src.requires_grad:
            f = src.data.shape[0]
            flat_idx = idx.ravel()
            g2 = g.reshape(f, -1)
            acc = np.empty((f, n))
            for r in range(f):  # per-row bincount beats np.add.at here
                acc[r] = np.bincount(flat_idx, weights=g2[r], minlength=n)
            _accum(src, acc, own=True)

    return _finish(out, (src,), bwd)


def edge_pairs(x, idx: np.ndarray) -> Tensor:
    """Stacked edge features [x_i ; x_j - x_i] of shape (2d, N, k).

    Fuses expand_cols + gather_cols + sub + concat into one taped op; the
    forward values are bit-identical to that four-op chain, and the backward
    scatter-add is exact.
    """
    x = _as_tensor(x)
    idx = np.asarray(idx)
    if x.data.ndim != 2 or idx.ndim != 2:
        raise DimensionError(f"edge_pairs: need (d,N) features and (N,k) indices, "
                             f"got {x.data.shape} and {idx.shape}")
    d, n = x.data.shape
    k = idx.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"edge_pairs: index out of range [0, {n})")
    out_data = np.empty((2 * d, n, k))
    out_data[:d] = x.data[:, :, None]
    np.take(x.data, idx, axis=1, out=out_data[d:])
    out_data[d:] -= out_data[:d]
    out = Tensor(out_data)

    def bwd(g):
        if x.requires_grad:
            g_center = g[:d]
            g_delta = g[d:]
            acc = g_center.sum(axis=2)
            acc -= g_delta.sum(axis=2)
            flat_idx = idx.ravel()
            g2 = g_delta.reshape(d, n * k)
            for r in range(d):
                acc[r] += np.bincount(flat_idx, weights=g2[r], minlength=n)
            _accum(x, acc, own=True)

    return _finish(out, (x,), bwd)


def expand_cols(a, k: int) -> Tensor:
    """Tile the columns of an (f, N) tensor into (f, N, k); backward sums over k."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"expand_cols: expected a 2-D tensor, got {a.data.shape}")
    out = Tensor(np.broadcast_to(a.data[:, :, None], (*a.data.shape, k)).copy())

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.sum(axis=2), own=True)

    return _finish(out, (a,), bwd)


def add_bias(a, bias) -> Tensor:
    """Add a length-f vector to every column of an (f, N) tensor."""
    a, bias = _as_tensor(a), _as_tensor(bias)
    if a.data.ndim != 2 or bias.data.shape != (a.data.shape[0],):
        raise DimensionError(f"add_bias: bias {bias.data.shape} does not fit rows of {a.data.shape}")
    out = Tensor(a.data + bias.data[:, None])

    def bwd(g):
        if bias.requires_grad:  # sum before a adopts g
            _accum(bias, g.sum(axis=1), own=True)
        if a.requires_grad:
            _accum(a, g, own=True)

    return _finish(out, (a, bias), bwd)


# ---------------------------------------------------------------------------
# reductions


def max_over_axis(a, axis: int) -> Tensor:
    """Max reduction; backward routes gradient to the argmax (lowest index on ties)."""
    a = _as_tensor(a)
    if a.data.shape[axis] == 0:
        raise DimensionError(f"max_over_axis: empty axis {axis} in shape {a.data.shape}")
    arg = np.argmax(a.data, axis=axis)  # first occurrence == lowest index
    out = Tensor(np.max(a.data, axis=axis))

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
            _accum(a, full, own=True)

    return _finish(out, (a,), bwd)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.sum(a.data))

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.full_like(a.data, float(g)), own=True)

    return _finish(out, (a,), bwd)


def frobenius_norm(a) -> Tensor:
    """sqrt(sum of squares), as a scalar tensor."""
    a = _as_tensor(a)
    norm = float(np.sqrt(np.sum(a.data * a.data)))
    out = Tensor(norm)

    def bwd(g):
        if a.requires_grad and norm > 0.0:
            _accum(a, (float(g) / norm) * a.data, own=True)

    return _finish(out, (a,), bwd)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of (C, N) logits against integer labels of length N.

    A (C,) vector is treated as a single column.  Labels outside [0, C) are
    rejected.
    """
    logits = _as_tensor(logits)
    data = logits.data
    squeeze = data.ndim == 1
    if squeeze:
        data = data[:, None]
    if data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be (C,N) or (C,), got {logits.data.shape}")
    c, n = data.shape
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: {n} columns but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"softmax_cross_entropy: labels must lie in [0, {c})")

    m = data.max(axis=0)
    exps = np.exp(data - m)
    z = exps.sum(axis=0)
    log_probs = data - m - np.log(z)
    out = Tensor(-log_probs[labels, np.arange(n)].mean())

    def bwd(g):
        if logits.requires_grad:
            grad = exps / z
            grad[labels, np.arange(n)] -= 1.0
            grad *= float(g) / n
            _accum(logits, grad[:, 0] if squeeze else grad, own=True)

    return _finish(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# finite differences (forward-only; used by tests and the gradcheck audit)


def finite_diff(loss_fn: Callable[[], float], tensor: Tensor, flat_index: int,
                step: float = 1e-5) -> float:
    """Central finite-difference derivative of ``loss_fn()`` w.r.t. one entry."""
    orig = tensor.data.flat[flat_index]
    with no_grad():
        tensor.data.flat[flat_index] = orig + step
        hi = loss_fn()
        tensor.data.flat[flat_index] = orig - step
        lo = loss_fn()
    tensor.data.flat[flat_index] = orig
    return (hi - lo) / (2.0 * step)


def relative_error(analytic: float, numeric: float, floor: float = 1e-10) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
