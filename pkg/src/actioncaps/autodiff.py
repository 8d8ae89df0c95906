"""Tape-based reverse-mode differentiation over dense float64 arrays.

Only the operations the capsule architecture needs are provided; this is not
a general autodiff library. A forward pass executed inside a ``with Tape():``
block records every op; ``backward(loss)`` walks the recording in reverse and
accumulates gradients into the participating tensors. Outside a tape, the same
functions compute values only, which is what evaluation paths use.

All data is float64. Gradient buffers are allocated lazily; a ``grad`` of
``None`` means zero.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError

_EPS_DIV = 1e-12  # guards 1/|s| factors at the squash/norm origin

_active_tape = None


class Tape:
    """Recording of one forward pass, confined to a single thread."""

    def __init__(self):
        self.nodes = []
        self._consumed = False

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def record(self, out, parents, backward_fn):
        out.tape = self
        out.node_id = len(self.nodes)
        self.nodes.append((out, parents, backward_fn))

    def backward(self, loss):
        """Reverse-accumulate d(loss)/d(tensor) for everything on the tape.

        The node list is in execution order, so its reverse is a valid
        reverse-topological order. The graph is freed afterwards; a tape
        is single-use.
        """
        if self._consumed:
            raise ContractError("tape already consumed by a previous backward")
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        loss.grad = np.ones_like(loss.data)
        for out, parents, backward_fn in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for parent, g in zip(parents, grads):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g
        self.nodes = []
        self._consumed = True


class DiffTensor:
    """Dense n-d float64 value, optionally part of a recorded computation."""

    __slots__ = ("data", "grad", "tape", "node_id")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.tape = None
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    def grad_or_zero(self):
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"DiffTensor(shape={self.shape})"

    def __neg__(self):
        return scale(self, -1.0)

    def __add__(self, other):
        if isinstance(other, DiffTensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, DiffTensor):
            return add(self, scale(other, -1.0))
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, DiffTensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data):
    """Wrap an array-like as a leaf DiffTensor (copies to float64)."""
    return DiffTensor(np.array(data, dtype=np.float64))


def _record(out, parents, backward_fn):
    if _active_tape is not None:
        _active_tape.record(out, parents, backward_fn)
    return out


def backward(loss):
    """Run reverse accumulation from a scalar recorded on a tape."""
    if loss.tape is None:
        raise ContractError("loss was not recorded on a tape")
    loss.tape.backward(loss)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    out = DiffTensor(a.data + b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def mul(a, b):
    out = DiffTensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def scale(a, factor):
    out = DiffTensor(a.data * factor)
    return _record(out, (a,), lambda g: (g * factor,))


def shift(a, offset):
    out = DiffTensor(a.data + offset)
    return _record(out, (a,), lambda g: (g,))


def relu(a):
    out = DiffTensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0  # subgradient at 0 is 0, deterministically
    return _record(out, (a,), lambda g: (g * mask,))


def log(a):
    out = DiffTensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def reshape(a, shape):
    shape = tuple(shape)
    out = DiffTensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = DiffTensor(np.transpose(a.data, axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inverse),))


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    if start < 0 or length < 0 or start + length > a.data.shape[axis]:
        raise DimensionError(
            f"narrow: [{start}, {start + length}) out of range on axis {axis} "
            f"of extent {a.data.shape[axis]}"
        )
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = DiffTensor(a.data[index].copy())

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(out, (a,), bw)


def concat(parts, axis):
    out = DiffTensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, offsets, axis=axis))

    return _record(out, tuple(parts), bw)


def broadcast_to(a, shape):
    shape = tuple(shape)
    out = DiffTensor(np.broadcast_to(a.data, shape).copy())
    return _record(out, (a,), lambda g: (_unbroadcast(g, a.data.shape),))


def reduce_sum(a, axis=None, keepdims=False):
    out = DiffTensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record(out, (a,), bw)


def mean_all(a):
    return scale(reduce_sum(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """a[..., P] @ b[P, Q] with gradients to both operands."""
    if b.data.ndim != 2:
        raise DimensionError(f"matmul: right operand must be 2-d, got {b.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner axes disagree, {a.data.shape[-1]} vs {b.data.shape[0]}"
        )
    out = DiffTensor(a.data @ b.data)

    def bw(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record(out, (a, b), bw)


def linear(x, w, b):
    """Affine map over the last axis: x[..., P] @ w[P, Q] + b[Q]."""
    if b.data.shape != (w.data.shape[1],):
        raise DimensionError(
            f"linear: bias axis 0 has {b.data.shape}, expected ({w.data.shape[1]},)"
        )
    return add(matmul(x, w), b)


def contract(spec, a, b):
    """Two-operand einsum whose backward is the transposed einsum.

    Every index of each operand must also appear in the output or in the
    other operand; the contractions this architecture uses all satisfy that.
    """
    ins, out_sub = spec.replace(" ", "").split("->")
    a_sub, b_sub = ins.split(",")
    if any(ch not in out_sub + b_sub for ch in a_sub) or any(
        ch not in out_sub + a_sub for ch in b_sub
    ):
        raise DimensionError(f"contract: unsupported subscripts {spec!r}")
    out = DiffTensor(np.einsum(spec, a.data, b.data))

    def bw(g):
        ga = np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, b.data)
        gb = np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, a.data)
        return ga, gb

    return _record(out, (a, b), bw)


# ---------------------------------------------------------------------------
# temporal convolution and pooling


def conv_temporal(x, w, bias, padding=None):
    """Convolution along the time axis only, shared across joint slots.

    x: (B, C_in, T, V); w: (C_out, C_in, k, 1); bias: (C_out,).
    Padding defaults to (k - 1) // 2, which preserves T for odd k.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"conv_temporal: input must be 4-d, got {x.shape}")
    if w.data.ndim != 4 or w.data.shape[3] != 1:
        raise DimensionError(
            f"conv_temporal: kernel must be (C_out, C_in, k, 1), got {w.shape}"
        )
    if w.data.shape[1] != x.data.shape[1]:
        raise DimensionError(
            f"conv_temporal: channel axis 1 mismatch, input has {x.data.shape[1]}, "
            f"kernel expects {w.data.shape[1]}"
        )
    c_out, c_in, k, _ = w.data.shape
    if bias.data.shape != (c_out,):
        raise DimensionError(
            f"conv_temporal: bias must be ({c_out},), got {bias.shape}"
        )
    if padding is None:
        padding = (k - 1) // 2
    b_dim, _, t_in, v = x.data.shape
    t_out = t_in + 2 * padding - k + 1
    if t_out < 1:
        raise DimensionError(
            f"conv_temporal: temporal axis 2 too short ({t_in}) for kernel {k} "
            f"with padding {padding}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (0, 0)))
    ker = w.data[:, :, :, 0]
    acc = np.zeros((b_dim, c_out, t_out, v))
    for dk in range(k):
        acc += np.einsum("bctv,oc->botv", xp[:, :, dk : dk + t_out, :], ker[:, :, dk])
    out = DiffTensor(acc + bias.data[None, :, None, None])

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for dk in range(k):
            gxp[:, :, dk : dk + t_out, :] += np.einsum(
                "botv,oc->bctv", g, ker[:, :, dk]
            )
            gw[:, :, dk, 0] = np.einsum(
                "botv,bctv->oc", g, xp[:, :, dk : dk + t_out, :]
            )
        gx = gxp[:, :, padding : padding + t_in, :] if padding else gxp
        gb = g.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(gx), gw, gb

    return _record(out, (x, w, bias), bw)


def maxpool_temporal(x, window):
    """Non-overlapping max over temporal windows; trailing remainder dropped.

    Gradient flows to the first maximal frame inside each window.
    """
    if window < 1:
        raise DimensionError(f"maxpool_temporal: window must be >= 1, got {window}")
    b, c, t, v = x.data.shape
    if t < window:
        raise DimensionError(
            f"maxpool_temporal: temporal axis 2 has {t} < window {window}"
        )
    t_out = t // window
    xr = x.data[:, :, : t_out * window, :].reshape(b, c, t_out, window, v)
    arg = xr.argmax(axis=3)  # first occurrence wins on ties
    out = DiffTensor(np.take_along_axis(xr, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :])

    def bw(g):
        gr = np.zeros_like(xr)
        np.put_along_axis(gr, arg[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        gx = np.zeros_like(x.data)
        gx[:, :, : t_out * window, :] = gr.reshape(b, c, t_out * window, v)
        return (gx,)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# capsule nonlinearities


def squash(s):
    """Norm-compressing, direction-preserving nonlinearity over the last axis.

    squash(s) = (|s|^2 / (1 + |s|^2)) * s / |s|, computed as s * |s|/(1+|s|^2)
    so the zero vector maps to the zero vector (with zero gradient) exactly.
    """
    n2 = (s.data * s.data).sum(axis=-1, keepdims=True)
    n = np.sqrt(n2)
    f = n / (1.0 + n2)
    out = DiffTensor(s.data * f)

    def bw(g):
        dot = (g * s.data).sum(axis=-1, keepdims=True)
        df = (1.0 - n2) / ((n + _EPS_DIV) * (1.0 + n2) ** 2)
        return (g * f + s.data * (dot * df),)

    return _record(out, (s,), bw)


def softmax(x, axis):
    """Stable softmax (max-subtracted) along the given axis."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(
            f"softmax: axis {axis} invalid for rank {x.data.ndim}"
        )
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = DiffTensor(y)

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _record(out, (x,), bw)


def norm_last(v):
    """Euclidean length along the last axis; zero vector has zero gradient."""
    n2 = (v.data * v.data).sum(axis=-1)
    n = np.sqrt(n2)
    out = DiffTensor(n)

    def bw(g):
        return (g[..., None] * v.data / (n[..., None] + _EPS_DIV),)

    return _record(out, (v,), bw)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_check(f, x, eps=1e-5):
    """Compare backward's gradient of f(x) against central finite differences.

    Returns the max elementwise relative error with denominator
    max(|analytic|, |numeric|, 1e-8). ``x`` is perturbed in place and restored.
    """
    if not 0.0 < eps <= 1e-2:
        raise ContractError(f"eps must lie in (0, 1e-2], got {eps}")
    with Tape() as tape:
        y = f(x)
        tape.backward(y)
    analytic = x.grad_or_zero().copy()
    x.grad = None
    numeric = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_difference_check_many(f, tensors, eps=1e-5):
    """Like finite_difference_check but across several leaves of one scalar.

    ``f`` takes no arguments and reads the tensors; one taped backward provides
    all analytic gradients, then each tensor is perturbed elementwise.
    """
    if not 0.0 < eps <= 1e-2:
        raise ContractError(f"eps must lie in (0, 1e-2], got {eps}")
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        y = f()
        tape.backward(y)
    analytic = [t.grad_or_zero().copy() for t in tensors]
    for t in tensors:
        t.grad = None
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        ga_flat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            denom = max(abs(ga_flat[i]), abs(fd), 1e-8)
            worst = max(worst, abs(ga_flat[i] - fd) / denom)
    return worst
