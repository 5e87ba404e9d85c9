"""Dense-tensor numerics with reverse-mode automatic differentiation.

Tensors wrap numpy float buffers and record a dynamic tape: every operation
that touches a ``requires_grad`` tensor stores its parents and a closure
mapping the output gradient to per-parent gradients.  ``Tensor.backward()``
walks the tape in reverse topological order, accumulates the contributions of
all consumers of a tensor, and adds the result into its ``grad`` buffer, so
repeated backward passes without zeroing stack additively.

Two precisions are supported: float32 (the training default) and float64
(used by the finite-difference gradient checks, where float32 rounding would
drown the comparison).  Output dtype follows the inputs.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, UsageError, ValidationError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (thread-local)."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """N-dimensional float array, optionally participating in the gradient tape.

    ``grad`` is a same-shape buffer present iff ``requires_grad``; it starts at
    zero, is allocated lazily, and accumulates across backward passes until
    explicitly zeroed.  Backward records gradient totals on tape leaves (the
    tensors you created directly, e.g. parameters and inputs).
    """

    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def grad(self) -> np.ndarray | None:
        if self.requires_grad and self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = value

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        # drop the buffer; the lazy getter recreates zeros on demand
        self._grad = None

    def backward(self) -> None:
        """Populate ``grad`` of every requires_grad leaf feeding this scalar."""
        if self.data.size != 1:
            raise UsageError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        if not self.requires_grad:
            return
        order = self._topological_order()
        # Per-call accumulation buffers; leaf .grad receives the finished totals.
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node._grad is None:
                    node._grad = g.copy()
                else:
                    node._grad += g
                continue
            for parent, contribution in zip(node._parents, node._backward(g)):
                if contribution is None or not parent.requires_grad:
                    continue
                existing = pending.get(id(parent))
                if existing is None:
                    # own the buffer: contributions may alias g or each other
                    pending[id(parent)] = np.array(contribution)
                else:
                    existing += contribution

    def _topological_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_coerce(other, self.dtype), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, "
            f"requires_grad={self.requires_grad})"
        )


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap an op result, attaching tape bookkeeping when recording."""
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True, dtype=data.dtype)
        out._parents = parents
        out._backward = backward
        return out
    return Tensor(data, dtype=data.dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise and structural ops -----------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), backward)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    data = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (g * np.ones_like(x.data),)

    return _make(data, (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(data, (x,), backward)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    data = np.transpose(x.data, axes)
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(data, (x,), backward)


# -- activations -------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def backward(g):
        # subgradient at 0 defined as 0
        return (g * (x.data > 0.0),)

    return _make(data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction for overflow safety."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (x,), backward)


# -- matmul ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: trailing two dims contract, leading dims broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul contraction mismatch: {a.shape} @ {b.shape} "
            f"(axis -1 of left is {a.shape[-1]}, axis -2 of right is {b.shape[-2]})"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(
            f"matmul leading dims incompatible: {a.shape} @ {b.shape}"
        ) from exc
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(data, (a, b), backward)


# -- convolution -------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int,
            out_h: int, out_w: int) -> np.ndarray:
    b, c = x.shape[:2]
    cols = np.empty((b, c, kh, kw, out_h, out_w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * out_h:stride,
                                 j:j + stride * out_w:stride]
    return cols


def _col2im(dcols: np.ndarray, padded_shape: tuple[int, ...],
            stride: int) -> np.ndarray:
    b, c, kh, kw, out_h, out_w = dcols.shape
    dx = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * out_h:stride,
               j:j + stride * out_w:stride] += dcols[:, :, i, j]
    return dx


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw] kernels.

    Output spatial size must come out exact: (H + 2*padding - kh) must be a
    non-negative multiple of stride (likewise W), otherwise a DimensionError
    names the offending axis.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D, got shape {x.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d kernel must be 4-D, got shape {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValidationError(f"conv2d stride must be >=1 and padding >=0, "
                              f"got stride={stride}, padding={padding}")
    b, c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise DimensionError(
            f"conv2d channel mismatch on axis 1: input has {c_in}, kernel expects {kc}"
        )
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(
            f"conv2d bias shape {bias.shape} does not match {c_out} output channels"
        )
    for name, dim, k in (("H", h, kh), ("W", w, kw)):
        span = dim + 2 * padding - k
        if span < 0 or span % stride != 0:
            raise DimensionError(
                f"conv2d output size on axis {name} is not a positive integer: "
                f"({dim} + 2*{padding} - {k}) / {stride} + 1"
            )
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        # pointwise conv: fold batch and space into the rows of a single GEMM
        k2d = kernel.data.reshape(c_out, c_in)
        rows = b * h * w
        xt = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(rows, c_in)
        out2 = xt @ k2d.T
        if bias is not None:
            out2 = out2 + bias.data[None, :]
        data = np.ascontiguousarray(
            out2.reshape(b, h, w, c_out).transpose(0, 3, 1, 2))

        def backward_1x1(g):
            gx = gk = gb = None
            gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(rows, c_out)
            if kernel.requires_grad:
                gk = (gt.T @ xt).reshape(kernel.shape)
            if bias is not None and bias.requires_grad:
                gb = gt.sum(axis=0)
            if x.requires_grad:
                gx = np.ascontiguousarray(
                    (gt @ k2d).reshape(b, h, w, c_in).transpose(0, 3, 1, 2))
            return (gx, gk) if bias is None else (gx, gk, gb)

        return _make(data, parents, backward_1x1)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    data = np.tensordot(kernel.data, cols,
                        axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
    if bias is not None:
        data = data + bias.data[None, :, None, None]

    def backward(g):
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = np.tensordot(g, kernel.data,
                                 axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
            gx = _col2im(np.ascontiguousarray(dcols), xp.shape, stride)
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + w]
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _make(np.ascontiguousarray(data), parents, backward)


# -- layer normalization -------------------------------------------------------


@dataclass
class LayerNormParams:
    """Learnable per-feature scale/shift plus the stabilizing epsilon."""

    gamma: Tensor
    beta: Tensor
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise DimensionError(
                f"gamma {self.gamma.shape} and beta {self.beta.shape} "
                "must be equal-length vectors"
            )
        if self.epsilon <= 0:
            raise ValidationError(f"epsilon must be positive, got {self.epsilon}")


def layer_norm(x: Tensor, params: LayerNormParams, axis: int = -1) -> Tensor:
    """Normalize ``axis`` to zero mean / unit population variance, then scale+shift."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"layer_norm axis {axis} invalid for shape {x.shape}")
    axis = axis % x.ndim
    n = x.shape[axis]
    if n == 0:
        raise DimensionError("layer_norm over a zero-length axis")
    if n != params.gamma.shape[0]:
        raise DimensionError(
            f"feature axis {axis} has length {n}, gamma has {params.gamma.shape[0]}"
        )
    gamma, beta = params.gamma, params.beta
    bshape = [1] * x.ndim
    bshape[axis] = n
    gb = gamma.data.reshape(bshape)
    mean = x.data.mean(axis=axis, keepdims=True)
    var = x.data.var(axis=axis, keepdims=True)  # population (biased)
    inv = 1.0 / np.sqrt(var + np.asarray(params.epsilon, dtype=x.dtype))
    xhat = (x.data - mean) * inv
    data = xhat * gb + beta.data.reshape(bshape)
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        dgamma = (g * xhat).sum(axis=reduce_axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=reduce_axes) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gb
            dx = inv * (
                dxhat - dxhat.mean(axis=axis, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
            )
        return dx, dgamma, dbeta

    return _make(data, (x, gamma, beta), backward)


# -- adaptive pooling ----------------------------------------------------------


def _pool_bounds(in_dim: int, out_dim: int) -> list[tuple[int, int]]:
    return [
        ((i * in_dim) // out_dim, -((-(i + 1) * in_dim) // out_dim))
        for i in range(out_dim)
    ]


def adaptive_pool(x: Tensor, out_h: int, out_w: int, mode: str = "max") -> Tensor:
    """Pool [B,C,H,W] to [B,C,out_h,out_w] over derived windows.

    Window i covers rows [floor(i*H/out_h), ceil((i+1)*H/out_h)).  Max mode
    backpropagates to the first (row-major) argmax of each window; avg mode
    spreads the gradient uniformly.
    """
    if mode not in ("max", "avg"):
        raise ValidationError(f"pool mode must be 'max' or 'avg', got {mode!r}")
    if x.ndim != 4:
        raise DimensionError(f"adaptive_pool input must be 4-D, got {x.shape}")
    b, c, h, w = x.shape
    if not (1 <= out_h <= h) or not (1 <= out_w <= w):
        raise DimensionError(
            f"output dims ({out_h}, {out_w}) must be within input dims ({h}, {w})"
        )
    rows = _pool_bounds(h, out_h)
    cols = _pool_bounds(w, out_w)
    data = np.empty((b, c, out_h, out_w), dtype=x.dtype)

    if mode == "max":
        arg_r = np.empty((b, c, out_h, out_w), dtype=np.intp)
        arg_c = np.empty((b, c, out_h, out_w), dtype=np.intp)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                window = x.data[:, :, r0:r1, c0:c1]
                flat = window.reshape(b, c, -1)
                idx = flat.argmax(axis=2)
                data[:, :, i, j] = np.take_along_axis(
                    flat, idx[:, :, None], axis=2
                )[:, :, 0]
                arg_r[:, :, i, j] = r0 + idx // (c1 - c0)
                arg_c[:, :, i, j] = c0 + idx % (c1 - c0)

        def backward(g):
            gx = np.zeros_like(x.data)
            bb, cc = np.meshgrid(np.arange(b), np.arange(c), indexing="ij")
            bb = bb[:, :, None, None]
            cc = cc[:, :, None, None]
            np.add.at(gx, (bb, cc, arg_r, arg_c), g)
            return (gx,)

    else:
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                data[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

        def backward(g):
            gx = np.zeros_like(x.data)
            for i, (r0, r1) in enumerate(rows):
                for j, (c0, c1) in enumerate(cols):
                    area = (r1 - r0) * (c1 - c0)
                    gx[:, :, r0:r1, c0:c1] += g[:, :, i:i + 1, j:j + 1] / area
            return (gx,)

    return _make(data, (x,), backward)


# -- loss ----------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of [B,C] logits against integer class labels.

    Fused log-sum-exp formulation; never materializes probabilities in the
    forward pass, so large logits cannot overflow.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [B, C], got shape {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(
            f"labels must be a length-{n} vector, got shape {labels.shape}"
        )
    if labels.dtype.kind not in "iu":
        raise ValidationError("labels must be integer class indices")
    if labels.min() < 0 or labels.max() >= c:
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ValidationError(f"label {bad} out of range [0, {c})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    data = np.asarray((lse - z[np.arange(n), labels]).mean(), dtype=logits.dtype)

    def backward(g):
        e = np.exp(z - m)
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make(data, (logits,), backward)


# -- Adam optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment buffers plus hyperparameters for one parameter set."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValidationError(f"learning rate must be >= 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError(
                f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}"
            )


def init_adam(params: dict[str, Tensor], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One in-place Adam update with bias correction. Gradients are left intact."""
    for name, p in params.items():
        if p.grad is None:
            raise UsageError(f"parameter {name!r} has no gradient buffer")
        if name not in state.m:
            raise UsageError(f"optimizer state is missing buffers for {name!r}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        step = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= np.asarray(state.lr * step, dtype=p.data.dtype)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int, dtype=DEFAULT_DTYPE) -> Tensor:
    """Weight tensor drawn from U(-a, a), a = sqrt(6 / (fan_in + fan_out))."""
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape).astype(dtype), requires_grad=True)
