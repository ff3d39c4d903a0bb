"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable value is a :class:`Tensor`: a numpy array plus the
record of the op that produced it. Calling :meth:`Tensor.backward` on a
scalar sweeps the graph in reverse topological order and accumulates
``d(loss)/d(leaf)`` into ``leaf.grad``.

Storage is float32. Leaves created from float64 arrays keep float64 so that
finite-difference checks can run the same graph in double precision.
There is no implicit broadcasting apart from python scalars; use
:func:`expand` / :func:`reshape` explicitly.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericalError(FloatingPointError):
    """An op produced NaN or Inf."""


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is None:
        dtype = np.float64 if arr.dtype == np.float64 else DEFAULT_DTYPE
    return np.ascontiguousarray(arr, dtype=dtype)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"{op} produced non-finite values")


class Tensor:
    """A node in the computation graph.

    ``data`` is treated as immutable once produced by an op. ``grad`` is
    allocated lazily by :meth:`backward` and always matches ``data.shape``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    order.reverse()
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    out.op = op
    if any(_needs_grad(p) for p in parents):
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unscalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    # reduce a gradient back to a scalar operand's shape
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=t.dtype).reshape(t.shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a)
    _binary_shapes(a, b, "add")

    def backward(g):
        return _unscalar(g, a), _unscalar(g, b)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    b = _lift(b, a)
    _binary_shapes(a, b, "sub")

    def backward(g):
        return _unscalar(g, a), _unscalar(-g, b)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a)
    _binary_shapes(a, b, "mul")

    def backward(g):
        return _unscalar(g * b.data, a), _unscalar(g * a.data, b)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _binary_shapes(a, b, "div")
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: zero in denominator")
    out = a.data / b.data

    def backward(g):
        return _unscalar(g / b.data, a), _unscalar(-g * out / b.data, b)

    return _make(out, (a, b), backward, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make(a.data * a.data.dtype.type(c), (a,), backward, "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make(a.data * mask, (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward, "sigmoid")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by _make
        out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")

    def backward(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backward, "log")


def square(a: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * g * a.data,)

    return _make(a.data * a.data, (a,), backward, "square")


# ------------------------------------------------------------ shape / reduce


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward, "reshape")


def flatten(a: Tensor) -> Tensor:
    """[N, ...] -> [N, prod(...)]."""
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")

    def backward(g):
        return (np.ascontiguousarray(g.T),)

    return _make(np.ascontiguousarray(a.data.T), (a,), backward, "transpose")


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of size-1 axes (same rank) to ``shape``."""
    shape = tuple(int(s) for s in shape)
    if a.data.ndim != len(shape):
        raise ShapeError(f"expand: rank {a.data.ndim} vs target {len(shape)}")
    axes = []
    for i, (s, t) in enumerate(zip(a.shape, shape)):
        if s != t:
            if s != 1:
                raise ShapeError(f"expand: cannot expand axis {i} of size {s} to {t}")
            axes.append(i)
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def backward(g):
        return (g.sum(axis=tuple(axes), keepdims=True) if axes else g,)

    return _make(out, (a,), backward, "expand")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    edges = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, edges, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


# ------------------------------------------------------------------ softmax


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax of a [N, K] tensor (log-sum-exp stabilised)."""
    x = a.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def softmax(a: Tensor) -> Tensor:
    return exp(log_softmax(a))


def softmax_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ------------------------------------------------------------------- matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# --------------------------------------------------------------------- conv


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _conv_check(x_shape, w_shape, stride, padding):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ShapeError("conv2d expects x[N,C,H,W] and w[F,C,kh,kw]")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    _, c, h, w = x_shape
    f, cw, kh, kw = w_shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cw}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError("conv2d: kernel larger than padded input")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_reference(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Explicit-loop cross-correlation; the correctness oracle for :func:`conv2d`."""
    _conv_check(x.shape, w.shape, stride, padding)
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = _pad(x, padding)
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    out = np.zeros((n, f, ho, wo), dtype=np.result_type(x, w))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    win = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = (win * w[o]).sum()
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, im2col style."""
    _conv_check(x.shape, w.shape, stride, padding)
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    xp = _pad(x.data, padding)
    # columns laid out [C*kh*kw, N*Ho*Wo]; this transpose order copies fastest
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(f, -1)
    out = np.ascontiguousarray((wmat @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * ho * wo)
        gw = (gmat @ cols.T).reshape(w.shape)
        gx = None
        if _needs_grad(x):
            gcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
            gx = np.ascontiguousarray(gx)
        return gx, gw

    return _make(out, (x, w), backward, "conv2d")


# --------------------------------------------------------------------- pool


def pool2d(x: Tensor, kind: str = "max", window: int = 2, stride: int | None = None) -> Tensor:
    """Max / average pooling without padding, or ``kind="global-avg"`` -> [N, C]."""
    if x.data.ndim != 4:
        raise ShapeError("pool2d expects [N,C,H,W]")
    if kind == "global-avg":
        return global_avg_pool(x)
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than input {h}x{w}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    offsets = [(i, j) for i in range(window) for j in range(window)]

    def view(arr, i, j):
        return arr[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]

    if kind == "max":
        out = view(x.data, 0, 0).copy()
        for i, j in offsets[1:]:
            np.maximum(out, view(x.data, i, j), out=out)
        # route each window's gradient to its first maximal element (row-major)
        taken = np.zeros(out.shape, dtype=bool)
        masks = []
        for i, j in offsets:
            sel = (view(x.data, i, j) == out) & ~taken
            taken |= sel
            masks.append(sel)

        def backward(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            for (i, j), sel in zip(offsets, masks):
                view(gx, i, j)[...] += g * sel
            return (gx,)

        return _make(np.ascontiguousarray(out), (x,), backward, "maxpool")
    if kind == "avg":
        inv = 1.0 / (window * window)
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for i, j in offsets:
            out += view(x.data, i, j)
        out *= x.dtype.type(inv)

        def backward(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            gs = g * inv
            for i, j in offsets:
                view(gx, i, j)[...] += gs
            return (gx,)

        return _make(np.ascontiguousarray(out), (x,), backward, "avgpool")
    raise ValueError(f"unknown pool kind {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(x.dtype),)

    return _make(out, (x,), backward, "global_avg_pool")


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply x[N,C,H,W] by per-(sample, channel) gates s[N,C]."""
    n, c, h, w = x.shape
    return mul(x, expand(reshape(s, (n, c, 1, 1)), (n, c, h, w)))


# ---------------------------------------------------------------- batchnorm


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation of x[N,C,H,W] (or [N,C]).

    In training mode the running statistics are updated in place with the
    unbiased batch variance. Eval mode reads them only.
    """
    if x.data.ndim not in (2, 4):
        raise ShapeError("batch_norm expects [N,C] or [N,C,H,W]")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.data.ndim == 2 else (1, -1, 1, 1)
    m = x.size // x.shape[1]
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in train mode needs a batch of at least 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * m / max(m - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape).astype(x.dtype)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes).reshape(gamma.shape)
        gb = g.sum(axis=axes).reshape(beta.shape)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx.astype(x.dtype), gg, gb

    return _make(np.ascontiguousarray(out, dtype=x.dtype), (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------------- rng


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by Philox, so the draws are a pure function of the key and the
    counter; streams never interfere with each other. ``counter`` counts
    Philox blocks of four 64-bit words (four doubles).
    """

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        self.seed = int(seed) & (2**64 - 1)
        self.stream_id = int(stream_id) & (2**64 - 1)
        self.counter = int(counter)
        bitgen = np.random.Philox(key=[self.seed, self.stream_id], counter=self.counter)
        self.gen = np.random.Generator(bitgen)

    def child(self, *tags: int) -> RngStream:
        return RngStream(derive_seed(self.seed, self.stream_id, *tags), 0)

    # thin pass-throughs used across the package
    def random(self, size=None):
        return self.gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, x):
        return self.gen.permutation(x)

    def beta(self, a, b, size=None):
        return self.gen.beta(a, b, size)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)


def derive_seed(*parts: int) -> int:
    """Hash integers into a 64-bit seed."""
    ss = np.random.SeedSequence([int(p) & (2**64 - 1) for p in parts])
    return int(ss.generate_state(1, np.uint64)[0])


# --------------------------------------------------------------- optimizer


class SGD:
    """SGD with momentum and L2 weight decay.

    v <- momentum * v + grad + wd * param;  param <- param - lr * v.
    Gradients are cleared after each step.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 0.05, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad.astype(p.dtype, copy=False)
            v *= self.momentum
            v += g
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data = p.data - p.dtype.type(self.lr) * v
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0, state=None):
    """Functional form of one :class:`SGD` step; returns the optimizer state."""
    opt = state if state is not None else SGD(params, lr, momentum, weight_decay)
    opt.lr = lr
    opt.step()
    return opt


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))
