"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation that touches a tensor requiring gradients records a node
holding its parents and an adjoint closure. Nodes are stamped with a
monotonically increasing sequence number, so execution order is a valid
topological order; :func:`backward` replays the recorded nodes in reverse
and then releases them (the tape is consumed).

Arithmetic runs in float32. Inside ``with precision(np.float64):`` every new
tensor is float64, which :func:`grad_check` uses for tight finite-difference
comparisons.
"""

from __future__ import annotations

import functools
import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .exceptions import ContractError, DimensionError

_state = threading.local()
_seq = itertools.count()


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextmanager
def precision(dtype):
    """Make ``dtype`` the dtype of all tensors created in this thread."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextmanager
def no_grad():
    """Disable graph recording (evaluation, detached computations)."""
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    """N-d float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._seq = -1
        self.name = name

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operators
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], adjoint: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = adjoint
        out._seq = next(_seq)
    return out


class Tape:
    """Recorded operations reachable from a scalar, in execution order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = set()
        nodes = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns the consumed tape (nodes in execution order) for inspection.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    if not loss.requires_grad:
        return tape
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                pg = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
                if parent.grad is None:
                    parent.grad = pg.copy()
                else:
                    parent.grad += pg
            else:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    for node in tape.nodes:
        node._parents = ()
        node._backward = None
    return tape


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    """Hadamard product (with numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    """Elementwise quotient. Callers must keep ``b`` away from zero."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    recorder = getattr(_state, "kinks", None)
    if recorder is not None:
        recorder.append(np.packbits(pos).tobytes())
    return _result(np.where(pos, x.data, 0), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def getitem(x: Tensor, index) -> Tensor:
    def adjoint(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(x.data[index], (x,), adjoint)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenation along ``axis`` (channel-wise ``Cat`` with axis 0)."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"cannot concatenate shapes {ref} and {t.shape} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=ax)),
    )


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(out, (x,), adjoint)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch extents, when present, must agree."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _result(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g),
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _result(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def adjoint(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), adjoint)


# ---------------------------------------------------------------------------
# spatial ops on [C, h, w] or [N, C, h, w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Same-padded stride-1 cross-correlation.

    ``weight`` is ``[C_out, C_in, kh, kw]`` with odd ``kh``, ``kw``.
    """
    single = x.ndim == 3
    if x.ndim not in (3, 4) or weight.ndim != 4:
        raise DimensionError(f"conv2d expects [C,h,w] or [N,C,h,w] input, got {x.shape}")
    xd = x.data[None] if single else x.data
    n, cin, h, w = xd.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {weight.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError(f"conv2d needs odd kernel extents, got {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d bias shape {bias.shape} does not match {cout} output channels")
    d = int(dilation)
    ph, pw = d * (kh - 1) // 2, d * (kw - 1) // 2
    wmat = weight.data.reshape(cout, cin * kh * kw)

    if kh == kw == 1:
        cols = xd.transpose(1, 0, 2, 3).reshape(cin, n * h * w)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))).transpose(1, 0, 2, 3)
        cols = np.empty((cin, kh, kw, n, h, w), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xp[:, :, i * d : i * d + h, j * d : j * d + w]
        cols = cols.reshape(cin * kh * kw, n * h * w)

    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(cout, n, h, w).transpose(1, 0, 2, 3)
    if single:
        out = out[0]

    def adjoint(g):
        g4 = g[None] if single else g
        g2 = g4.transpose(1, 0, 2, 3).reshape(cout, n * h * w)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gb = g2.sum(axis=1) if bias is not None else None
        gcols = wmat.T @ g2
        if kh == kw == 1:
            gx = gcols.reshape(cin, n, h, w).transpose(1, 0, 2, 3)
        else:
            gcols = gcols.reshape(cin, kh, kw, n, h, w)
            gxp = np.zeros((cin, n, h + 2 * ph, w + 2 * pw), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i * d : i * d + h, j * d : j * d + w] += gcols[:, i, j]
            gx = gxp[:, :, ph : ph + h, pw : pw + w].transpose(1, 0, 2, 3)
        if single:
            gx = gx[0]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(np.ascontiguousarray(out), parents, adjoint)


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping ``factor x factor`` average pooling (stride ``factor``)."""
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise DimensionError(f"avg_pool2d factor {factor} does not divide spatial size {h}x{w}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(*lead, h // factor, factor, w // factor, factor)
    out = blocks.mean(axis=(-3, -1))

    def adjoint(g):
        gx = np.repeat(np.repeat(g, factor, axis=-2), factor, axis=-1) / (factor * factor)
        return (gx,)

    return _result(out, (x,), adjoint)


def resample(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Separable linear map on the last two axes: ``rows @ x @ cols.T``."""
    if rows.shape[1] != x.shape[-2] or cols.shape[1] != x.shape[-1]:
        raise DimensionError(f"resample matrices {rows.shape}/{cols.shape} do not fit input {x.shape}")
    rows = rows.astype(x.dtype)
    cols = cols.astype(x.dtype)
    out = rows @ x.data @ cols.T
    return _result(out, (x,), lambda g: (rows.T @ g @ cols,))


@functools.lru_cache(maxsize=256)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-d bilinear weights, half-pixel centres (align_corners=False)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    m.flags.writeable = False
    return m


@functools.lru_cache(maxsize=256)
def adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-d adaptive average pooling weights (bins floor(i*n/o) .. ceil((i+1)*n/o))."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    m.flags.writeable = False
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = x.shape[-2:]
    if min(h, w, out_h, out_w) < 1:
        raise DimensionError(f"bilinear_resize extents must be >= 1, got {h}x{w} -> {out_h}x{out_w}")
    if (h, w) == (out_h, out_w):
        return x
    return resample(x, bilinear_matrix(h, out_h), bilinear_matrix(w, out_w))


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    return resample(x, adaptive_pool_matrix(h, out_h), adaptive_pool_matrix(w, out_w))


def resize_array(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a plain array (no graph)."""
    h, w = a.shape[-2:]
    if (h, w) == (out_h, out_w):
        return a
    return bilinear_matrix(h, out_h) @ a @ bilinear_matrix(w, out_w).T


# ---------------------------------------------------------------------------
# verification


@contextmanager
def _record_kinks():
    """Collect the ReLU sign pattern of every relu call in this thread."""
    prev = getattr(_state, "kinks", None)
    _state.kinks = patterns = []
    try:
        yield patterns
    finally:
        _state.kinks = prev


@dataclass
class GradCheckReport:
    max_error: float
    checked: int
    skipped: int  # coordinates whose +-step interval crosses a ReLU kink


def grad_check_report(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-4,
    max_coords: int | None = None,
    rng=None,
) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f(x)`` with central differences.

    ``f`` may close over other tensors; ``x`` is perturbed in place, so it
    may be a parameter that ``f`` reads indirectly. Everything runs in
    float64 and ``x`` is restored afterwards. The error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``. Central differences are meaningless
    when ``x +- step`` straddles a ReLU kink, so such coordinates are
    skipped and counted. With ``max_coords`` only that many coordinates
    (drawn with ``rng``, a :class:`~protoformer.rng.SplitMix64`) are used.
    """
    original = x.data
    saved_flag = x.requires_grad
    with precision(np.float64):
        x.data = original.astype(np.float64)
        x.requires_grad = True
        x.grad = None
        try:
            loss = f(x)
            backward(loss)
            analytic = np.zeros(x.size) if x.grad is None else x.grad.astype(np.float64).reshape(-1)
            flat = x.data.reshape(-1)
            coords = range(flat.size)
            if max_coords is not None and max_coords < flat.size:
                coords = rng.choice(flat.size, max_coords)
            worst, checked, skipped = 0.0, 0, 0
            with no_grad():
                for i in coords:
                    v = flat[i]
                    flat[i] = v + step
                    with _record_kinks() as up_pattern:
                        up = f(x).item()
                    flat[i] = v - step
                    with _record_kinks() as down_pattern:
                        down = f(x).item()
                    flat[i] = v
                    if up_pattern != down_pattern:
                        skipped += 1
                        continue
                    numeric = (up - down) / (2.0 * step)
                    a = analytic[i]
                    worst = max(worst, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
                    checked += 1
        finally:
            x.data = original
            x.requires_grad = saved_flag
            x.grad = None
    return GradCheckReport(worst, checked, skipped)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-4,
    max_coords: int | None = None,
    rng=None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    See :func:`grad_check_report` for the details.
    """
    return grad_check_report(f, x, step, max_coords, rng).max_error
