"""
Dense float tensors, the operator set the network needs, and tape-based
reverse-mode differentiation over those operators.

Operators are pure: they never modify their inputs. A tape records an
operator only while it is active in the calling thread (``with Tape():``)
and at least one input requires a gradient.
"""
import threading
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .config import float_dtype
from .errors import NumericalError, ShapeError, ValidationError

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=float_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if not np.isfinite(arr).all():
            label = f" '{name}'" if name else ""
            raise NumericalError(f"non-finite values in tensor{label} of shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    output: Tensor
    backward_fn: object


class Tape:
    """
    Ordered record of operations. A tape is single-threaded: recording and
    backward must happen on the thread that entered it.
    """

    def __init__(self):
        self.nodes = []
        self._produced = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, output, backward_fn):
        self.nodes.append(TapeNode(op, tuple(inputs), output, backward_fn))
        self._produced.add(id(output))
        output.requires_grad = True

    def produced(self, tensor):
        return id(tensor) in self._produced


def record_op(op, inputs, output, backward_fn):
    """Record ``output = op(*inputs)`` on the active tape when any input is tracked."""
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, output, backward_fn)
    return output


def backward(loss, tape=None):
    """
    Reverse-topological accumulation from a scalar loss. Populates ``.grad``
    on every leaf (a tracked tensor not produced on the tape) and returns
    ``{leaf: grad}``.
    """
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise ValidationError("backward needs a tape")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValidationError("loss was not produced on this tape (detached graph)")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
            if not tape.produced(t):
                leaves[key] = t

    result = {}
    for key, t in leaves.items():
        g = grads[key]
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for '{t.name or 'tensor'}'")
        t.grad = g
        result[t] = g
    return result


def _check_4d(x, op):
    if x.ndim != 4:
        raise ShapeError(f"{op} expects a (N, C, H, W) tensor, got shape {x.shape}")


# Convolution (stride 1, zero padding, cross-correlation)

def _conv_taps(xp, kernel, hout, wout):
    cout, _, kh, kw = kernel.shape
    out = np.zeros((cout, xp.shape[0], hout, wout), dtype=xp.dtype)
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[:, :, dy:dy + hout, dx:dx + wout]
            out += np.tensordot(kernel[:, :, dy, dx], patch, axes=([1], [1]))
    return out.transpose(1, 0, 2, 3)


def conv2d(x, kernel, bias, padding=1):
    _check_4d(x, "conv2d")
    _check_4d(kernel, "conv2d kernel")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    if padding < 0:
        raise ShapeError("conv2d padding must be >= 0")
    hout = h + 2 * padding - kh + 1
    wout = w + 2 * padding - kw + 1
    if hout <= 0 or wout <= 0:
        raise ShapeError(f"conv2d output dims non-positive: ({hout}, {wout})")

    pads = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pads) if padding else x.data
    k = kernel.data
    out = _conv_taps(xp, k, hout, wout) + bias.data[None, :, None, None]
    result = Tensor(out)

    def backward_fn(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gk = np.zeros_like(k) if kernel.requires_grad else None
        for dy in range(kh):
            for dx in range(kw):
                patch = xp[:, :, dy:dy + hout, dx:dx + wout]
                if gk is not None:
                    gk[:, :, dy, dx] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
                if gx is not None:
                    contrib = np.tensordot(k[:, :, dy, dx], g, axes=([0], [1]))
                    gx[:, :, dy:dy + hout, dx:dx + wout] += contrib.transpose(1, 0, 2, 3)
        if gx is not None and padding:
            gx = gx[:, :, padding:padding + h, padding:padding + w]
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gk, gb

    return record_op("conv2d", (x, kernel, bias), result, backward_fn)


def relu(x):
    mask = x.data > 0
    result = Tensor(np.where(mask, x.data, 0.0))

    def backward_fn(g):
        # subgradient 0 at x == 0
        return (g * mask,)

    return record_op("relu", (x,), result, backward_fn)


def sigmoid(x):
    # saturate to the open interval (0, 1) for any finite input
    one = x.data.dtype.type(1.0)
    s = np.clip(expit(x.data), np.finfo(x.data.dtype).tiny, np.nextafter(one, x.data.dtype.type(0.0)))
    result = Tensor(s)

    def backward_fn(g):
        return (g * s * (1.0 - s),)

    return record_op("sigmoid", (x,), result, backward_fn)


# Pooling with indices

class PoolIndices:
    """Per-window argmax offsets (0..3, row-major inside the 2x2 window)."""

    __slots__ = ("offsets",)

    def __init__(self, offsets):
        offsets = np.asarray(offsets)
        if offsets.ndim != 4:
            raise ShapeError(f"pool indices must be 4-D, got shape {offsets.shape}")
        if offsets.size and (offsets.min() < 0 or offsets.max() > 3):
            raise ValidationError("pool indices must lie in {0, 1, 2, 3}")
        self.offsets = offsets.astype(np.int8)

    @property
    def shape(self):
        return self.offsets.shape

    def source_hw(self):
        return 2 * self.offsets.shape[2], 2 * self.offsets.shape[3]


def _windows(arr):
    n, c, h, w = arr.shape
    win = arr.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(n, c, h // 2, w // 2, 4)


def _gather(full, offsets):
    return np.take_along_axis(_windows(full), offsets[..., None].astype(np.intp), axis=-1)[..., 0]


def _scatter(values, offsets):
    n, c, h2, w2 = values.shape
    win = np.zeros((n, c, h2, w2, 4), dtype=values.dtype)
    np.put_along_axis(win, offsets[..., None].astype(np.intp), values[..., None], axis=-1)
    return win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)


def maxpool2x2(x):
    _check_4d(x, "maxpool2x2")
    _, _, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even H and W, got ({h}, {w})")
    win = _windows(x.data)
    # argmax returns the first maximum: ties go to the smallest offset
    offsets = win.argmax(axis=-1)
    values = np.take_along_axis(win, offsets[..., None], axis=-1)[..., 0]
    indices = PoolIndices(offsets)
    result = Tensor(values)

    def backward_fn(g):
        return (_scatter(g, indices.offsets),)

    return record_op("maxpool2x2", (x,), result, backward_fn), indices


def maxunpool2x2(x, indices, out_hw=None):
    _check_4d(x, "maxunpool2x2")
    if tuple(indices.shape) != tuple(x.shape):
        raise ShapeError(f"unpool indices shape {indices.shape} != input shape {x.shape}")
    expected = (2 * x.shape[2], 2 * x.shape[3])
    if out_hw is not None and tuple(out_hw) != expected:
        raise ShapeError(f"unpool output size {tuple(out_hw)} != {expected}")
    result = Tensor(_scatter(x.data, indices.offsets))

    def backward_fn(g):
        return (_gather(g, indices.offsets),)

    return record_op("maxunpool2x2", (x,), result, backward_fn)


# Channel plumbing

def concat_channels(a, b):
    _check_4d(a, "concat_channels")
    _check_4d(b, "concat_channels")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels batch/spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    result = Tensor(np.concatenate([a.data, b.data], axis=1))

    def backward_fn(g):
        return g[:, :ca], g[:, ca:]

    return record_op("concat_channels", (a, b), result, backward_fn)


def slice_channels(x, start, stop):
    _check_4d(x, "slice_channels")
    if not 0 <= start <= stop <= x.shape[1]:
        raise ShapeError(f"channel slice [{start}, {stop}) outside 0..{x.shape[1]}")
    result = Tensor(x.data[:, start:stop])

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return record_op("slice_channels", (x,), result, backward_fn)


def tensor_sum(x):
    result = Tensor(x.data.sum())

    def backward_fn(g):
        return (np.full(x.shape, np.asarray(g).item(), dtype=x.data.dtype),)

    return record_op("sum", (x,), result, backward_fn)


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    result = Tensor(a.data * b.data)

    def backward_fn(g):
        return g * b.data, g * a.data

    return record_op("mul", (a, b), result, backward_fn)


def grad_check(f, x, eps=1e-5, coords=None):
    """
    Largest relative error between tape gradients and central differences of
    the scalar function ``f`` at ``x``. ``coords`` restricts the comparison to
    the given flat indices.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    if tape.produced(out):
        backward(out, tape)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    base = np.array(x.data, dtype=np.float64).ravel()
    if coords is None:
        coords = range(base.size)
    worst = 0.0
    for i in coords:
        shifted = base.copy()
        shifted[i] = base[i] + eps
        f_plus = f(Tensor(shifted.reshape(x.shape))).item()
        shifted[i] = base[i] - eps
        f_minus = f(Tensor(shifted.reshape(x.shape))).item()
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic.flat[i])
        err = abs(numeric - a) / max(abs(numeric), abs(a), 1e-8)
        worst = max(worst, err)
    return worst
