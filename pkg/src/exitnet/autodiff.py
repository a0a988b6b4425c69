"""Reverse-mode automatic differentiation on numpy arrays.

Every operation records itself on an implicit tape (the ``_parents`` links of
the output tensor). ``Tensor.backward()`` walks that tape once in reverse
topological order and accumulates gradients into every reachable tensor with
``requires_grad`` set. Values are float32 by default; gradient checking is
done in float64 via :func:`finite_diff_grad`.

Any operation that would produce a NaN or Inf raises ``FloatingPointError``
instead of letting it propagate.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d",
    "depthwise_conv2d",
    "relu",
    "tanh",
    "atanh",
    "sqrt",
    "maxpool2d",
    "avgpool2d",
    "global_avg_pool",
    "batch_norm",
    "softmax",
    "cross_entropy",
    "tensor_sum",
    "tensor_mean",
    "l2_norm",
    "finite_diff_grad",
]

ATANH_CLAMP = 1e-6  # atanh inputs are clamped to [-1+ATANH_CLAMP, 1-ATANH_CLAMP]


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite value produced by op '{op}'")
    return data


def _as_float_dtype(dtype) -> np.dtype:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        return np.dtype(np.float32)
    return dtype


class Tensor:
    """An n-dimensional value array participating in a recorded computation.

    ``data`` holds the values, ``grad`` (same shape, populated by
    ``backward``) the gradient of the most recent scalar loss. Tensors
    created by operations carry links to their parents; leaf tensors have
    none.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        arr = np.asarray(data)
        arr = arr.astype(_as_float_dtype(dtype if dtype is not None else arr.dtype), copy=False)
        self.data: np.ndarray = _check_finite(arr, "leaf")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(op={self._op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` for every tensor this loss depends on.

        The loss must be scalar; its own gradient is 1. Nodes are visited in
        exact reverse topological order, so each node's gradient is complete
        before it propagates to its parents.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._grad_fn is not None and node.grad is not None:
                node._grad_fn(node.grad)

    # Operators delegate to the module-level op functions.
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _lift(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def sum(self, axis=None):
        return tensor_sum(self, axis=axis)

    def mean(self):
        return tensor_mean(self)


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(data, op)
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._grad_fn = None
    out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def grad_fn(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))
        out._grad_fn = grad_fn
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def grad_fn(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.data.shape))
        out._grad_fn = grad_fn
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def grad_fn(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))
        out._grad_fn = grad_fn
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def grad_fn(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        out._grad_fn = grad_fn
    return out


def relu(x: Tensor) -> Tensor:
    out = _make(np.maximum(x.data, 0.0), (x,), "relu")
    if out.requires_grad:
        mask = x.data > 0
        def grad_fn(g):
            x._accumulate(g * mask)
        out._grad_fn = grad_fn
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = _make(t, (x,), "tanh")
    if out.requires_grad:
        def grad_fn(g):
            x._accumulate(g * (1.0 - t * t))
        out._grad_fn = grad_fn
    return out


def atanh(x: Tensor) -> Tensor:
    """Inverse hyperbolic tangent with inputs clamped away from +-1."""
    clamped = np.clip(x.data, -1.0 + ATANH_CLAMP, 1.0 - ATANH_CLAMP)
    out = _make(np.arctanh(clamped), (x,), "atanh")
    if out.requires_grad:
        def grad_fn(g):
            # zero gradient in the clamped region, 1/(1-x^2) elsewhere
            inside = (x.data > -1.0 + ATANH_CLAMP) & (x.data < 1.0 - ATANH_CLAMP)
            x._accumulate(g * inside / (1.0 - clamped * clamped))
        out._grad_fn = grad_fn
    return out


def sqrt(x: Tensor) -> Tensor:
    root = np.sqrt(x.data)
    out = _make(root, (x,), "sqrt")
    if out.requires_grad:
        def grad_fn(g):
            x._accumulate(g * 0.5 / np.maximum(root, 1e-12))
        out._grad_fn = grad_fn
    return out


def _reshape(x: Tensor, shape) -> Tensor:
    out = _make(x.data.reshape(shape), (x,), "reshape")
    if out.requires_grad:
        def grad_fn(g):
            x._accumulate(g.reshape(x.data.shape))
        out._grad_fn = grad_fn
    return out


def _getitem(x: Tensor, index) -> Tensor:
    out = _make(np.asarray(x.data[index]), (x,), "getitem")
    if out.requires_grad:
        def grad_fn(g):
            full = np.zeros_like(x.data)
            np.add.at(full, index, g)
            x._accumulate(full)
        out._grad_fn = grad_fn
    return out


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    out = _make(np.asarray(x.data.sum(axis=axis)), (x,), "sum")
    if out.requires_grad:
        def grad_fn(g):
            if axis is None:
                x._accumulate(np.broadcast_to(g, x.data.shape).copy())
            else:
                x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())
        out._grad_fn = grad_fn
    return out


def tensor_mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = _make(np.asarray(x.data.mean()), (x,), "mean")
    if out.requires_grad:
        def grad_fn(g):
            x._accumulate(np.broadcast_to(g / n, x.data.shape).copy())
        out._grad_fn = grad_fn
    return out


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm over all elements: sqrt(sum(x^2))."""
    norm = float(np.sqrt((x.data.astype(np.float64) ** 2).sum()))
    out = _make(np.asarray(norm, dtype=x.dtype), (x,), "l2_norm")
    if out.requires_grad:
        def grad_fn(g):
            # subgradient 0 at the origin; 1e-12 guard avoids division by zero
            x._accumulate(g * x.data / max(norm, 1e-12))
        out._grad_fn = grad_fn
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Probabilities along ``axis``, stabilized by max subtraction."""
    if x.data.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    p = softmax_values(x.data, axis=axis)
    out = _make(p, (x,), "softmax")
    if out.requires_grad:
        def grad_fn(g):
            dot = (g * p).sum(axis=axis, keepdims=True)
            x._accumulate(p * (g - dot))
        out._grad_fn = grad_fn
    return out


def softmax_values(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array stabilized softmax (shared by the op and non-graph callers)."""
    logits = np.asarray(logits)
    if logits.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return _check_finite(e / e.sum(axis=axis, keepdims=True), "softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over a (batch, classes) logits tensor."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or logits.data.ndim != 2 or labels.shape[0] != logits.data.shape[0]:
        raise ValueError("cross_entropy expects (batch, classes) logits and (batch,) labels")
    n, c = logits.data.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("label outside class range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(n), labels]
    loss = float((logsumexp - picked).mean())
    out = _make(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy")
    if out.requires_grad:
        probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        def grad_fn(g):
            grad = probs.copy()
            grad[np.arange(n), labels] -= 1.0
            logits._accumulate(g * grad / n)
        out._grad_fn = grad_fn
    return out


def _pad_input(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D convolution, NCHW input and (out, in, kh, kw) weight.

    Zero padding, stride >= 1. The kernel loop runs over the (kh, kw)
    offsets; each offset is a batched contraction over input channels.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n, ci, h, w = x.data.shape
    co, ci_w, kh, kw = weight.data.shape
    if ci != ci_w:
        raise ValueError(f"conv2d channel mismatch: input {ci}, weight {ci_w}")
    xp = _pad_input(x.data, padding)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    out_data = np.zeros((n, co, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride]
            out_data += np.einsum("nchw,oc->nohw", patch, weight.data[:, :, i, j], optimize=True)
    if bias is not None:
        out_data += bias.data.reshape(1, co, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _make(out_data, parents, "conv2d")
    if out.requires_grad:
        def grad_fn(g):
            if bias is not None and bias.requires_grad:
                bias._accumulate(g.sum(axis=(0, 2, 3)))
            if weight.requires_grad:
                gw = np.zeros_like(weight.data)
                for i in range(kh):
                    for j in range(kw):
                        patch = xp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride]
                        gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, patch, optimize=True)
                weight._accumulate(gw)
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += np.einsum(
                            "nohw,oc->nchw", g, weight.data[:, :, i, j], optimize=True
                        )
                if padding:
                    gxp = gxp[:, :, padding : padding + h, padding : padding + w]
                x._accumulate(gxp)
        out._grad_fn = grad_fn
    return out


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution, weight shape (channels, kh, kw)."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n, c, h, w = x.data.shape
    cw, kh, kw = weight.data.shape
    if c != cw:
        raise ValueError(f"depthwise channel mismatch: input {c}, weight {cw}")
    xp = _pad_input(x.data, padding)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    out_data = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride]
            out_data += patch * weight.data[:, i, j].reshape(1, c, 1, 1)
    if bias is not None:
        out_data += bias.data.reshape(1, c, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _make(out_data, parents, "depthwise_conv2d")
    if out.requires_grad:
        def grad_fn(g):
            if bias is not None and bias.requires_grad:
                bias._accumulate(g.sum(axis=(0, 2, 3)))
            if weight.requires_grad:
                gw = np.zeros_like(weight.data)
                for i in range(kh):
                    for j in range(kw):
                        patch = xp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride]
                        gw[:, i, j] = (g * patch).sum(axis=(0, 2, 3))
                weight._accumulate(gw)
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += (
                            g * weight.data[:, i, j].reshape(1, c, 1, 1)
                        )
                if padding:
                    gxp = gxp[:, :, padding : padding + h, padding : padding + w]
                x._accumulate(gxp)
        out._grad_fn = grad_fn
    return out


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial dims must divide by ``size``."""
    n, c, h, w = x.data.shape
    if h % size or w % size:
        raise ValueError(f"spatial dims {(h, w)} not divisible by pool size {size}")
    ho, wo = h // size, w // size
    windows = x.data.reshape(n, c, ho, size, wo, size)
    out_data = windows.max(axis=(3, 5))
    out = _make(out_data, (x,), "maxpool2d")
    if out.requires_grad:
        # ties broken toward the first max within each window
        flat = windows.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
        argmax = flat.argmax(axis=-1)
        def grad_fn(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, argmax[..., None], g[..., None], axis=-1)
            gx = gflat.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            x._accumulate(gx)
        out._grad_fn = grad_fn
    return out


def avgpool2d(x: Tensor, size: int = 2) -> Tensor:
    n, c, h, w = x.data.shape
    if h % size or w % size:
        raise ValueError(f"spatial dims {(h, w)} not divisible by pool size {size}")
    ho, wo = h // size, w // size
    out_data = x.data.reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))
    out = _make(out_data, (x,), "avgpool2d")
    if out.requires_grad:
        scale = 1.0 / (size * size)
        def grad_fn(g):
            gx = np.repeat(np.repeat(g, size, axis=2), size, axis=3) * scale
            x._accumulate(gx.astype(x.dtype, copy=False))
        out._grad_fn = grad_fn
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, c) spatial mean."""
    n, c, h, w = x.data.shape
    out = _make(x.data.mean(axis=(2, 3)), (x,), "global_avg_pool")
    if out.requires_grad:
        scale = 1.0 / (h * w)
        def grad_fn(g):
            x._accumulate(np.broadcast_to(g[:, :, None, None] * scale, x.data.shape).copy())
        out._grad_fn = grad_fn
    return out


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
    """Per-channel normalization over (n, c, h, w).

    Training mode normalizes with batch statistics and updates the running
    buffers in place; inference mode uses the stored running statistics, so
    gradients are deterministic per sample.
    """
    n, c, h, w = x.data.shape
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out_data = (xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)).astype(x.dtype, copy=False)
    out = _make(out_data, (x, gamma, beta), "batch_norm")
    if out.requires_grad:
        m = n * h * w
        def grad_fn(g):
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gxh = g * gamma.data.reshape(1, c, 1, 1)
                if training:
                    # gradient through the batch statistics
                    s1 = gxh.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    s2 = (gxh * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    gx = (gxh - s1 / m - xhat * s2 / m) * inv_std.reshape(1, c, 1, 1)
                else:
                    gx = gxh * inv_std.reshape(1, c, 1, 1)
                x._accumulate(gx.astype(x.dtype, copy=False))
        out._grad_fn = grad_fn
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], point: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient estimate, coordinatewise, in float64.

    ``f`` maps an array to a scalar. Returns (f(x + h*e_i) - f(x - h*e_i)) / 2h
    for every coordinate i. Independent of the tape: usable as an oracle for
    ``backward``.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    x = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        fp = float(f(x))
        flat_x[i] = orig - h
        fm = float(f(x))
        flat_x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("non-finite function value in finite_diff_grad")
        flat_g[i] = (fp - fm) / (2.0 * h)
    return grad
