"""Minimal dense-tensor engine with reverse-mode differentiation.

Everything is float64. Ops record onto the innermost active ``Tape``
(a thread-local stack, so concurrent forward passes in different threads
never share gradient state). ``backward(loss)`` replays the tape in
reverse and populates ``.grad`` on every recorded tensor that requires
gradients.

Convolutions run as im2col + one batched GEMM on the forward pass; the
backward pass uses per-kernel-tap tensordots, which keeps peak memory at
one activation set instead of retaining im2col buffers.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ShapeError

_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


class Tape:
    """Ordered record of differentiable primitives (execution order)."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: exited a tape that is not innermost")
        return False

    @staticmethod
    def active():
        stack = _tape_stack()
        return stack[-1] if stack else None


class _Node:
    __slots__ = ("inputs", "output", "grad_fn")

    def __init__(self, inputs, output, grad_fn):
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


class Tensor:
    """Dense float64 array with optional gradient slot.

    Tensors are immutable by convention once created; only optimizer
    steps write into ``.data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _record(out: Tensor, inputs: tuple, grad_fn) -> Tensor:
    tape = Tape.active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.nodes.append(_Node(inputs, out, grad_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad tensor on the loss's tape.

    Grads accumulate across repeated calls; clear with ``zero_grad``.
    Accumulation buffers are shared with grad_fn outputs until a second
    contribution arrives (the ``owned`` set tracks which buffers may be
    added into in place), so single-consumer chains never copy.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    tape = loss.tape
    if tape is None:
        raise ShapeError("backward() called on a tensor that was not produced on an active tape")

    grads = {id(loss): np.ones_like(loss.data)}
    owned = {id(loss)}
    seen = {id(loss): loss}
    for node in reversed(tape.nodes):
        for t in node.inputs:
            if t.requires_grad:
                seen[id(t)] = t
        seen[id(node.output)] = node.output
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        owned.discard(id(node.output))
        out_t = node.output
        out_t.grad = g if out_t.grad is None else out_t.grad + g
        for t, ig in zip(node.inputs, node.grad_fn(g)):
            if ig is None or not t.requires_grad:
                continue
            key = id(t)
            if key not in grads:
                grads[key] = ig
            elif key in owned:
                grads[key] += ig
            else:
                grads[key] = grads[key] + ig
                owned.add(key)
    for key, g in grads.items():
        t = seen[key]
        t.grad = g if t.grad is None else t.grad + g
    for t in seen.values():
        if t.requires_grad and t.grad is None:
            t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# primitives


def _check_4d(t: Tensor, name: str):
    if t.data.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (batch, channels, height, width), got {t.data.shape}")


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, k, k, oh * ow))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j, :] = xp[
                :, :, i : i + stride * oh : stride, j : j + stride * ow : stride
            ].reshape(n, c, oh * ow)
    return cols.reshape(n, c * k * k, oh * ow)


def _conv_raw(x: np.ndarray, w: np.ndarray, b, stride: int, padding: int) -> np.ndarray:
    """Forward cross-correlation on plain arrays (shared by conv2d and its backward)."""
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, k, stride, oh, ow)
    out = np.matmul(w.reshape(co, ci * k * k), cols)
    if b is not None:
        out += b[:, None]
    return out.reshape(n, co, oh, ow)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a batched image with a (C_out, C_in, k, k) kernel."""
    _check_4d(x, "conv2d input")
    _check_4d(w, "conv2d weight")
    n, ci, h, wd = x.data.shape
    co, wci, k, k2 = w.data.shape
    if k != k2 or k % 2 != 1:
        raise ShapeError(f"kernel must be square with odd extent, got {k}x{k2}")
    if wci != ci:
        raise ShapeError(f"channel axis mismatch: input has {ci} channels, weight expects {wci}")
    if b.data.shape != (co,):
        raise ShapeError(f"bias axis must have extent {co}, got {b.data.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"stride must be >= 1 and padding >= 0, got {stride}/{padding}")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"non-positive spatial output {oh}x{ow} for input {h}x{wd}")

    out = Tensor(_conv_raw(x.data, w.data, b.data, stride, padding))

    def grad_fn(g):
        g4 = g.reshape(n, co, oh, ow)
        gx = gw = gb = None
        if b.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        if x.requires_grad or w.requires_grad:
            xpb = (
                np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
                if padding
                else x.data
            )
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(k):
                for j in range(k):
                    xs = xpb[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
                    gw[:, :, i, j] = np.tensordot(g4, xs, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            if stride == 1 and k - 1 - padding >= 0:
                # input grad of a stride-1 cross-correlation is itself a
                # cross-correlation: flip the kernel spatially, swap the
                # channel axes, and pad the output grad by k - 1 - padding.
                w_swap = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gx = _conv_raw(np.ascontiguousarray(g4), w_swap, None, 1, k - 1 - padding)
            else:
                gxp = np.zeros_like(xpb)
                for i in range(k):
                    for j in range(k):
                        contrib = np.tensordot(g4, w.data[:, :, i, j], axes=([1], [0]))
                        gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                            contrib.transpose(0, 3, 1, 2)
                        )
                gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return gx, gw, gb

    return _record(out, (x, w, b), grad_fn)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def grad_fn(g):
        return (g * (x.data > 0.0),)

    return _record(out, (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = Tensor(out_data)

    def grad_fn(g):
        return (g * out.data * (1.0 - out.data),)

    return _record(out, (x,), grad_fn)


def clamp01(x: Tensor) -> Tensor:
    """Clip into [0, 1]; gradient passes only strictly inside the interval."""
    out = Tensor(np.clip(x.data, 0.0, 1.0))

    def grad_fn(g):
        return (g * ((x.data > 0.0) & (x.data < 1.0)),)

    return _record(out, (x,), grad_fn)


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial extents must be even."""
    _check_4d(x, "avg_pool2d input")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2d needs even spatial extents, got {h}x{w}")
    out = Tensor(x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)))

    def grad_fn(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        gx *= 0.25
        return (gx,)

    return _record(out, (x,), grad_fn)


def nearest_upsample2d(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling."""
    _check_4d(x, "nearest_upsample2d input")
    n, c, h, w = x.data.shape
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))

    def grad_fn(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), grad_fn)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with x of shape (batch, in) and w of shape (in, out)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear expects 2-D operands, got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(
            f"feature axis mismatch: input has {x.data.shape[1]}, weight expects {w.data.shape[0]}"
        )
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"bias axis must have extent {w.data.shape[1]}, got {b.data.shape}")
    out = Tensor(x.data @ w.data + b.data)

    def grad_fn(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _record(out, (x, w, b), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)

    def grad_fn(g):
        return g, g

    return _record(out, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data)

    def grad_fn(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), grad_fn)


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data + c)

    def grad_fn(g):
        return (g,)

    return _record(out, (x,), grad_fn)


def mul_scalar(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)

    def grad_fn(g):
        return (g * c,)

    return _record(out, (x,), grad_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_4d(a, "concat_channels lhs")
    _check_4d(b, "concat_channels rhs")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ShapeError(
            f"concat_channels needs matching batch/spatial axes, got {a.data.shape} vs {b.data.shape}"
        )
    ca = a.data.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    def grad_fn(g):
        return g[:, :ca], g[:, ca:]

    return _record(out, (a, b), grad_fn)


def tile_batch(x: Tensor, n: int) -> Tensor:
    """Repeat a batch-1 tensor n times along the batch axis."""
    _check_4d(x, "tile_batch input")
    if x.data.shape[0] != 1:
        raise ShapeError(f"tile_batch expects batch extent 1, got {x.data.shape[0]}")
    out = Tensor(np.repeat(x.data, n, axis=0))

    def grad_fn(g):
        return (g.sum(axis=0, keepdims=True),)

    return _record(out, (x,), grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    _check_4d(x, "global_avg_pool input")
    n, c, h, w = x.data.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def grad_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return _record(out, (x,), grad_fn)


def tsum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def grad_fn(g):
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _record(out, (x,), grad_fn)


def tmean(x: Tensor) -> Tensor:
    return mul_scalar(tsum(x), 1.0 / x.data.size)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over all elements (scalar)."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    out = Tensor(np.mean(diff * diff))

    def grad_fn(g):
        scale = 2.0 / diff.size
        ga = g * scale * diff if a.requires_grad else None
        gb = -g * scale * diff if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), grad_fn)


def l2_norm(x: Tensor) -> Tensor:
    nrm = float(np.sqrt(np.sum(x.data * x.data)))
    out = Tensor(nrm)

    def grad_fn(g):
        if nrm == 0.0:
            return (np.zeros_like(x.data),)
        return (g * x.data / nrm,)

    return _record(out, (x,), grad_fn)


def pairwise_diffs(p: Tensor) -> Tensor:
    """Vector (n,) -> matrix (n, n) of differences p_i - p_j."""
    if p.data.ndim != 1:
        raise ShapeError(f"pairwise_diffs expects a vector, got {p.data.shape}")
    out = Tensor(p.data[:, None] - p.data[None, :])

    def grad_fn(g):
        return (g.sum(axis=1) - g.sum(axis=0),)

    return _record(out, (p,), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def grad_fn(g):
        return (g.reshape(x.data.shape),)

    return _record(out, (x,), grad_fn)
