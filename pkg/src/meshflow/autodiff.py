"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy float64 array plus an optional gradient buffer.
Primitive operations record themselves on the active Tape; Tape.backward
walks the recorded operations in reverse, accumulating gradients.

Gradients accumulate across backward calls (grads are never zeroed
implicitly), so summing k per-sample gradients is just k backward calls.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np


def _tune_allocator():
    """Keep large freed buffers on the heap instead of returning them to
    the kernel.

    The forward/backward passes allocate megabyte-scale temporaries at a
    high rate. With glibc's default dynamic thresholds each one is served
    by mmap and released by munmap, so every reuse pays page faults and
    page zeroing — measured ~30x slower than heap reuse for the array
    sizes on this hot path. Raising M_MMAP_THRESHOLD and M_TRIM_THRESHOLD
    keeps the buffers resident. Best effort: silently skipped on
    platforms without glibc mallopt.
    """
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        m_mmap_threshold, m_trim_threshold = -3, -1
        libc.mallopt(m_mmap_threshold, 1 << 30)
        libc.mallopt(m_trim_threshold, 1 << 30)
    except Exception:
        pass


_tune_allocator()


def _leaky_values(s, slope):
    """leaky_relu applied to raw values; bit-identical to
    np.where(s >= 0, s, slope * s) but built from np.maximum/np.minimum,
    which are several times faster here than np.where."""
    out = np.maximum(s, 0.0)
    neg = np.minimum(s, 0.0)
    neg *= slope
    out += neg
    return out


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class Tensor:
    """Dense float64 array participating in automatic differentiation."""

    __slots__ = ("values", "grad", "requires_grad", "_tape", "_idx")

    # make numpy defer ndarray <op> Tensor to the reflected methods
    __array_priority__ = 100.0

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._idx = -1

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def ndim(self):
        return self.values.ndim

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.values.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self):
        return Tensor(self.values.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; everything funnels into the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed primitive operations.

    Operations append in execution order, so inputs always precede the
    node that consumes them; backward walks the list once in reverse.
    """

    def __init__(self):
        self._nodes = []

    def __len__(self):
        return len(self._nodes)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def record(self, out, parents, backfn):
        out._tape = self
        out._idx = len(self._nodes)
        self._nodes.append((out, parents, backfn))

    def backward(self, loss):
        if loss.values.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss._tape is None:
            return  # constant loss: every gradient is zero
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        # pending gradients, keyed by tensor identity; flushed into .grad at
        # the end so k backward calls add k complete per-call gradients
        pending = {id(loss): np.ones_like(loss.values)}
        holders = {id(loss): loss}
        for out, parents, backfn in reversed(self._nodes[: loss._idx + 1]):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            holders.pop(id(out), None)
            if out is not loss:
                out.grad = g if out.grad is None else out.grad + g
            for parent, pg in zip(parents, backfn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
                    holders[key] = parent
        for key, g in pending.items():
            leaf = holders[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


_TAPE_STACK = [Tape()]
_GRAD_ENABLED = [True]


def active_tape():
    return _TAPE_STACK[-1]


def reset_tape():
    """Replace the default (bottom-of-stack) tape with a fresh one."""
    _TAPE_STACK[0] = Tape()


@contextmanager
def no_grad():
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def backward(loss):
    if loss._tape is None:
        if loss.values.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        return  # constant loss: every gradient is zero
    loss._tape.backward(loss)


def _record(values, parents, backfn):
    out = Tensor(values)
    if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPE_STACK[-1].record(out, parents, backfn)
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to the given (possibly broadcast) shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        values = a.values + b.values
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _record(values, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        values = a.values - b.values
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _record(values, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        values = a.values * b.values
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _record(
        values,
        (a, b),
        lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        values = a.values / b.values
    except ValueError:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}")
    return _record(
        values,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.values, a.shape),
            _unbroadcast(-g * a.values / (b.values * b.values), b.shape),
        ),
    )


def exp(a):
    a = as_tensor(a)
    values = np.exp(a.values)
    return _record(values, (a,), lambda g: (g * values,))


def log(a):
    a = as_tensor(a)
    return _record(np.log(a.values), (a,), lambda g: (g / a.values,))


def sqrt(a, guard=0.0):
    """Element-wise square root.

    With guard > 0, the derivative is zeroed where the input is <= guard;
    distance terms use this to take the zero subgradient at coincident
    points instead of dividing by zero.
    """
    a = as_tensor(a)
    values = np.sqrt(a.values)

    def backfn(g):
        if guard > 0.0:
            safe = np.where(a.values > guard, values, np.inf)
            return (g * 0.5 / safe,)
        return (g * 0.5 / values,)

    return _record(values, (a,), backfn)


def square(a):
    a = as_tensor(a)
    return mul(a, a)


def powi(a, p):
    """a raised to a constant scalar power."""
    a = as_tensor(a)
    p = float(p)
    values = a.values**p
    return _record(values, (a,), lambda g: (g * p * a.values ** (p - 1.0),))


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    values = _leaky_values(a.values, slope)
    return _record(
        values, (a,), lambda g: (g * np.where(a.values >= 0.0, 1.0, slope),)
    )


def fused_affine_leaky(a, b, bias, slope=0.2):
    """leaky_relu(a + b + bias) in one pass (a, b: (n, d); bias: (d,)).

    `b` may be None to compute leaky_relu(a + bias). Numerically
    identical to composing add + add + leaky_relu but without the
    intermediate tensors; this sits on the per-layer hot path."""
    a, bias = as_tensor(a), as_tensor(bias)
    if bias.shape != a.shape[-1:]:
        raise ShapeError(
            f"fused_affine_leaky: incompatible shapes {a.shape}, {bias.shape}"
        )
    if b is None:
        s = a.values + bias.values
    else:
        b = as_tensor(b)
        if a.shape != b.shape:
            raise ShapeError(
                f"fused_affine_leaky: incompatible shapes {a.shape}, {b.shape}"
            )
        s = a.values + b.values
        s += bias.values
    values = _leaky_values(s, slope)

    def backfn(g):
        gm = g * np.where(s >= 0.0, 1.0, slope)
        gbias = gm.sum(axis=tuple(range(gm.ndim - 1)))
        if b is None:
            return (gm, gbias)
        return (gm, gm, gbias)

    parents = (a, bias) if b is None else (a, b, bias)
    return _record(values, parents, backfn)


def vertex_standardize(x, gamma, beta, eps=1e-5):
    """Per-row feature standardization with a learnable affine, fused.

    y = gamma * (x - mean_row) / sqrt(var_row + eps) + beta, with the
    statistics taken across the feature axis of each row."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2 or gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(
            f"vertex_standardize: incompatible shapes {x.shape}, {gamma.shape}, {beta.shape}"
        )
    d = x.shape[1]
    mu = x.values.mean(axis=1, keepdims=True)
    xc = x.values - mu
    var = np.einsum("ij,ij->i", xc, xc) / d
    inv_std = (1.0 / np.sqrt(var + eps))[:, None]
    # one fused scaling pass instead of materializing xhat here; backward
    # reconstructs xhat (off the latency-critical path) when needed
    values = np.einsum("ij,i,j->ij", xc, inv_std[:, 0], gamma.values)
    values += beta.values

    def backfn(g):
        xhat = xc * inv_std
        dxhat = g * gamma.values
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return (dx, (g * xhat).sum(axis=0), g.sum(axis=0))

    return _record(values, (x, gamma, beta), backfn)


# ---------------------------------------------------------------------------
# linear algebra / shape primitives


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != (b.shape[0] if b.ndim >= 1 else None):
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    values = a.values @ b.values

    def backfn(g):
        av, bv = a.values, b.values
        a2 = av.reshape(1, -1) if av.ndim == 1 else av
        b2 = bv.reshape(-1, 1) if bv.ndim == 1 else bv
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        ga = (g2 @ b2.T).reshape(av.shape)
        gb = (a2.T @ g2).reshape(bv.shape)
        return ga, gb

    return _record(values, (a, b), backfn)


def reshape(a, shape):
    a = as_tensor(a)
    return _record(a.values.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a):
    a = as_tensor(a)
    return _record(a.values.T.copy(), (a,), lambda g: (g.T,))


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    values = a.values.sum(axis=axis, keepdims=keepdims)

    def backfn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _record(values, (a,), backfn)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backfn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(values, tuple(tensors), backfn)


def take(a, key):
    """Basic or integer-array indexing; gradient scatters back with np.add.at."""
    a = as_tensor(a)
    values = a.values[key]
    if values.ndim == 0:
        values = values.reshape(())

    def backfn(g):
        ga = np.zeros_like(a.values)
        np.add.at(ga, key, g)
        return (ga,)

    return _record(values, (a,), backfn)


def broadcast_rows(a, n):
    """Repeat a length-F vector into an (n, F) matrix."""
    a = as_tensor(a)
    if a.ndim != 1:
        raise ShapeError(f"broadcast_rows expects a 1-D tensor, got {a.shape}")
    values = np.broadcast_to(a.values, (n, a.shape[0])).copy()
    return _record(values, (a,), lambda g: (g.sum(axis=0),))


def amin(a, axis):
    """Minimum along an axis, returning (values, argmin indices).

    The argmin is treated as locally constant: gradients route only into
    the winning entries. np.argmin breaks ties at the lowest index.
    """
    a = as_tensor(a)
    idx = np.argmin(a.values, axis=axis)
    values = np.take_along_axis(a.values, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backfn(g):
        ga = np.zeros_like(a.values)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _record(values, (a,), backfn), idx


# ---------------------------------------------------------------------------
# segment operations (edge lists sorted by segment id)


def _segment_bounds(segment_ids, num_segments):
    ids = np.asarray(segment_ids)
    if ids.size and np.any(np.diff(ids) < 0):
        raise ValueError("segment_ids must be sorted ascending")
    starts = np.searchsorted(ids, np.arange(num_segments), side="left")
    ends = np.searchsorted(ids, np.arange(num_segments), side="right")
    return starts, ends


def _segment_sum_values(values, starts, ends):
    # reduceat only over non-empty segments: consecutive non-empty starts
    # are adjacent in `values`, so each bucket sums exactly its segment
    # (clamping empty out-of-range starts would misassign trailing rows)
    n = starts.shape[0]
    out = np.zeros((n,) + values.shape[1:])
    nonempty = np.nonzero(ends > starts)[0]
    if values.shape[0] == 0 or nonempty.size == 0:
        return out
    out[nonempty] = np.add.reduceat(values, starts[nonempty], axis=0)
    return out


def segment_sum(a, segment_ids, num_segments):
    """Sum rows of a into num_segments buckets given sorted segment ids."""
    a = as_tensor(a)
    starts, ends = _segment_bounds(segment_ids, num_segments)
    values = _segment_sum_values(a.values, starts, ends)
    ids = np.asarray(segment_ids)

    def backfn(g):
        return (g[ids],)

    return _record(values, (a,), backfn)


def segment_softmax(scores, segment_ids, num_segments, bounds=None):
    """Softmax within each segment of a sorted 1-D (or (E, H)) score array.

    `bounds` may carry precomputed (starts, ends) from _segment_bounds
    for callers that reuse the same segment structure many times."""
    scores = as_tensor(scores)
    ids = np.asarray(segment_ids)
    starts, ends = _segment_bounds(ids, num_segments) if bounds is None else bounds
    sv = scores.values
    if sv.shape[0] == 0:
        return _record(sv.copy(), (scores,), lambda g: (g.copy(),))
    safe_starts = np.minimum(starts, sv.shape[0] - 1)
    seg_max = np.maximum.reduceat(sv, safe_starts, axis=0)
    shifted = np.exp(sv - seg_max[ids])
    denom = _segment_sum_values(shifted, starts, ends)
    values = shifted / denom[ids]

    def backfn(g):
        weighted = _segment_sum_values(g * values, starts, ends)
        return (values * (g - weighted[ids]),)

    return _record(values, (scores,), backfn)


def softmax(a):
    """Softmax over a 1-D tensor (single segment)."""
    a = as_tensor(a)
    return segment_softmax(a, np.zeros(a.shape[0], dtype=np.int64), 1)


# ---------------------------------------------------------------------------
# 2-D convolution (stride 1, configurable zero padding)


def conv2d(x, w, b=None, padding=0):
    """Convolve x (C, H, W) with w (O, C, kh, kw); stride 1.

    Implemented as one matrix product per kernel tap over shifted views
    of the padded input; the gradient mirrors it with one slice-add per
    tap. Cheaper than im2col at these sizes (no column matrix is built).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects x (C,H,W) and w (O,C,kh,kw), got {x.shape}, {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch between x {x.shape} and w {w.shape}")
    cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    p = int(padding)
    xp = np.pad(x.values, ((0, 0), (p, p), (p, p))) if p else x.values
    oh, ow = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape}")
    # forward as a single column-matrix product; backward keeps the
    # cheaper one-slice-add-per-tap form (only the forward pass is on the
    # inference hot path)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    col = windows.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, oh * ow)
    out = (w.values.reshape(cout, cin * kh * kw) @ col).reshape(cout, oh, ow)

    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
        out = out + b.values[:, None, None]
        parents.append(b)

    def backfn(g):
        gw = np.empty_like(w.values)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gw[:, :, i, j] = np.tensordot(g, xp[:, i : i + oh, j : j + ow], axes=([1, 2], [1, 2]))
                gxp[:, i : i + oh, j : j + ow] += np.tensordot(w.values[:, :, i, j].T, g, axes=1)
        gx = gxp[:, p : p + h, p : p + wid] if p else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return _record(out, tuple(parents), backfn)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam optimizer over a fixed list of parameter tensors."""

    def __init__(self, params, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"Adam.step: parameter {i} has no gradient")
            g = p.grad
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * (g * g)
            mhat = self._m[i] / bc1
            vhat = self._v[i] / bc2
            p.values -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# parameter checkpoints

CHECKPOINT_MAGIC = b"MFCKPT1"


def save_checkpoint(path, params):
    """Write named parameters: magic, then per-parameter records of
    (u32 name length, name bytes, u32 rank, u32 dims..., little-endian f64 values)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, tensor in params.items():
            values = tensor.values if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=np.float64)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", values.ndim))
            for d in values.shape:
                fh.write(struct.pack("<I", d))
            fh.write(values.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into a dict of name -> Tensor."""
    params = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated record for parameter '{name}'")
            values = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
            params[name] = Tensor(values)
    return params
