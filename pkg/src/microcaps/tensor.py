"""Dense N-d arrays with a reverse-mode gradient tape.

Every differentiable op builds a new :class:`Tensor` whose ``_ctx`` records the
input tensors and a closure mapping the output gradient to input gradients.
:func:`backward` linearises the graph reachable from a scalar loss into a
:class:`Tape` and walks it once in reverse.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised for invalid backward requests (non-scalar loss, detached graph)."""


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class _Context:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """A real-valued array that may participate in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_ctx", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._ctx: _Context | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"tensor {self.name or ''} holds non-finite values".strip())
        if self.grad is not None and not np.all(np.isfinite(self.grad)):
            raise FloatingPointError(f"gradient of tensor {self.name or ''} holds non-finite values")

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return hadamard_multiply(self, _lift(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return hadamard_multiply(self, _lift(-1.0, self.dtype))

    def __sub__(self, other):
        return add(self, -_lift(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


_recording = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without building a graph, e.g. for inference."""
    global _recording
    prev, _recording = _recording, False
    try:
        yield
    finally:
        _recording = prev


def _make(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    if _recording and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._ctx = _Context(op, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# tape


@dataclass
class TapeEntry:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]


@dataclass
class Tape:
    """Operations reachable from a tensor, in topological (forward) order."""

    entries: list[TapeEntry] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.inputs:
                    if id(parent) not in seen:
                        stack.append((parent, False))
        entries = [TapeEntry(t._ctx.op, t, t._ctx.inputs) for t in order if t._ctx is not None]
        return cls(entries)

    def __len__(self) -> int:
        return len(self.entries)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Gradients add onto whatever is already stored; call :func:`zero_grad` between
    independent steps.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._ctx is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) + (loss.grad if loss.grad is not None else 0)
            return Tape()
        raise GraphError("loss is detached from every parameter")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g_out = grads.pop(id(entry.output), None)
        if g_out is None:
            continue
        in_grads = entry.output._ctx.backward(g_out)
        for inp, g in zip(entry.inputs, in_grads):
            if g is None or not inp.requires_grad:
                continue
            if inp._ctx is None:
                inp.grad = g.copy() if inp.grad is None else inp.grad + g
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = g if prev is None else prev + g
    return tape


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return _make(out, "add", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def hadamard_multiply(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"hadamard_multiply: cannot broadcast {a.shape} with {b.shape}") from exc
    return _make(
        out,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, "relu", (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _make(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc
    return _make(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), "transpose", (x,),
                 lambda g: (g.transpose(inverse),))


def reduce_sum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            g = np.expand_dims(g, tuple(a % x.ndim for a in axes))
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), "sum", (x,), bwd)


def vector_norm(x: Tensor, axis: int = -1, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    """Euclidean norm along ``axis``. ``eps`` keeps the gradient finite at zero."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)

    def bwd(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(norm > 0, norm, 1.0)
        return (gk * x.data / safe,)

    out = norm if keepdims else np.squeeze(norm, axis=axis)
    return _make(out, "norm", (x,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weights + bias`` for ``x`` of shape [N, D]."""
    if x.ndim != 2:
        raise ShapeError(f"dense: input must be [N, D], got {x.shape}")
    if weights.ndim != 2 or weights.shape[0] != x.shape[1]:
        raise ShapeError(f"dense: axis 1 of input ({x.shape[1]}) does not match weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: bias shape {bias.shape} does not match output width {weights.shape[1]}")
    out = x.data @ weights.data + bias.data
    return _make(
        out,
        "dense",
        (x, weights, bias),
        lambda g: (g @ weights.data.T, x.data.T @ g, g.sum(axis=0)),
    )


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d_nhwc(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
                padding: int = 0) -> Tensor:
    """Cross-correlation of an [N,H,W,C] input with [kh,kw,C,F] kernels, giving [N,Ho,Wo,F]."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be [N,H,W,C], got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be [kh,kw,C,F], got {kernel.shape}")
    n, h, w, c = x.shape
    kh, kw, kc, f = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: channel axis mismatch, input has {c} channels, kernel expects {kc}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * padding:
        raise ShapeError(f"conv2d: height axis too small ({h}+2*{padding}) for kernel height {kh}")
    if kw > w + 2 * padding:
        raise ShapeError(f"conv2d: width axis too small ({w}+2*{padding}) for kernel width {kw}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {f} filters")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    # im2col rows ordered (kh, kw, C) to match the kernel's memory layout
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    kmat = kernel.data.reshape(kh * kw * c, f)
    out = cols @ kmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, f)

    def bwd(g):
        g2 = g.reshape(n * ho * wo, f)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding : padding + h, padding : padding + w, :] if padding else gxp
        return (gx, gk) if bias is None else (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, "conv2d", inputs, bwd)


def _pool_windows(x: Tensor, size: int, name: str):
    if x.ndim != 4:
        raise ShapeError(f"{name}: input must be [N,H,W,C], got {x.shape}")
    if size < 1:
        raise ShapeError(f"{name}: window must be >= 1, got {size}")
    n, h, w, c = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeError(f"{name}: spatial axes {h}x{w} smaller than window {size}")
    return ho, wo


def max_pool2d_nhwc(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size`` x ``size`` max pooling over [N,H,W,C]; trailing rows/cols are dropped.

    Ties route the gradient to the first maximum in row-major window order.
    """
    ho, wo = _pool_windows(x, size, "max_pool2d")
    views = [x.data[:, i : ho * size : size, j : wo * size : size, :] for i in range(size) for j in range(size)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def bwd(g):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for k, v in enumerate(views):
            i, j = divmod(k, size)
            hit = (v == out) & ~taken
            taken |= hit
            gx[:, i : ho * size : size, j : wo * size : size, :] = np.where(hit, g, 0)
        return (gx,)

    return _make(out, "max_pool2d", (x,), bwd)


def avg_pool2d_nhwc(x: Tensor, size: int = 2) -> Tensor:
    ho, wo = _pool_windows(x, size, "avg_pool2d")
    scale = 1.0 / (size * size)
    out = np.zeros((x.shape[0], ho, wo, x.shape[3]), dtype=x.dtype)
    for i in range(size):
        for j in range(size):
            out += x.data[:, i : ho * size : size, j : wo * size : size, :]
    out *= scale

    def bwd(g):
        gx = np.zeros_like(x.data)
        for i in range(size):
            for j in range(size):
                gx[:, i : ho * size : size, j : wo * size : size, :] = g * scale
        return (gx,)

    return _make(out, "avg_pool2d", (x,), bwd)


# ---------------------------------------------------------------------------
# channel-first front ends

_TO_NHWC = (0, 2, 3, 1)
_TO_NCHW = (0, 3, 1, 2)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an [N,C,H,W] input with [F,C,kh,kw] kernels, giving [N,F,Ho,Wo]."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be [N,C,H,W], got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be [F,C,kh,kw], got {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: channel axis mismatch, input has {x.shape[1]} channels, "
                         f"kernel expects {kernel.shape[1]}")
    out = conv2d_nhwc(transpose(x, _TO_NHWC), transpose(kernel, (2, 3, 1, 0)), bias, stride, padding)
    return transpose(out, _TO_NCHW)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Max pooling over [N,C,H,W]; see :func:`max_pool2d_nhwc`."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: input must be [N,C,H,W], got {x.shape}")
    return transpose(max_pool2d_nhwc(transpose(x, _TO_NHWC), size), _TO_NCHW)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: input must be [N,C,H,W], got {x.shape}")
    return transpose(avg_pool2d_nhwc(transpose(x, _TO_NHWC), size), _TO_NCHW)


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [N, K], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), labels] - logsumexp
    loss = np.asarray(-logp.mean(), dtype=logits.dtype)

    def bwd(g):
        p = np.exp(z - logsumexp[:, None])
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make(loss, "softmax_xent", (logits,), bwd)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place.

    A ``None`` gradient is treated as zero.
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("adam_step: params, grads and state disagree in length")
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"adam_step: state shape {m.shape} does not match param {p.shape}")
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} does not match param {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.step = t
    return state


class Adam:
    """Stateful wrapper around :func:`adam_step` for a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        zero_grad(self.params)


# ---------------------------------------------------------------------------
# gradient checking


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``arr`` (mutated and restored)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative error, floored so that tiny gradients compare absolutely."""
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)
