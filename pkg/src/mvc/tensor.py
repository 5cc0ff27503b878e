"""Dense tensors with reverse-mode automatic differentiation.

Every op records its inputs and a backward closure on the output tensor.
``Tensor.backward`` walks the recorded nodes in reverse execution order
(each node carries a creation sequence number), so gradients are
accumulated in a fixed order and are bit-reproducible.

Precision is global: ``set_precision("float64")`` or the ``precision``
context manager switch every newly created tensor.
"""

from __future__ import annotations

import itertools
import json
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

_DTYPES = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32
_grad_enabled = True
_seq = itertools.count()

NORM_EPS = 1e-12


class TensorError(ValueError):
    pass


class ShapeError(TensorError):
    pass


class DegenerateInputError(TensorError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def set_precision(name: str) -> None:
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


def get_dtype():
    return _dtype


@contextmanager
def precision(name: str):
    prev = np.dtype(_dtype).name
    set_precision(name)
    try:
        yield
    finally:
        set_precision(prev)


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=_dtype, copy=True) if not (
            isinstance(data, np.ndarray) and data.dtype == _dtype
        ) else data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = ""
        self._seq = next(_seq)

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if self.data.size != 1:
            raise TensorError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._backward is None:
            raise TensorError("backward called on a tensor with no recorded ops (empty tape)")
        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._seq in nodes:
                continue
            nodes[node._seq] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        grads = {self._seq: np.ones_like(self.data)}
        for seq in sorted(nodes, reverse=True):
            node = nodes[seq]
            g = grads.pop(seq, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._seq in grads:
                    grads[parent._seq] = grads[parent._seq] + pg
                else:
                    grads[parent._seq] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor(data.astype(_dtype, copy=False))
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias broadcast along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        axes = tuple(range(a.ndim - 1))
        return _result(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)), "add_bias")
    raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a) -> Tensor:
    return scale(a, -1.0)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is reported by _result
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DegenerateInputError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# -- reductions and shape ops ---------------------------------------------------


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def split(a, sizes: Sequence[int], axis: int = 0) -> list:
    a = as_tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    parts, start = [], 0
    for size in sizes:
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + size)
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros_like(a.data)
            full[index] = g
            return (full,)

        parts.append(_result(a.data[index].copy(), (a,), backward, "split"))
        start += size
    return parts


# -- linear algebra -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for x [N, in], weight [out, in], bias [out]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is None:
        return _result(out, (x, weight), lambda g: (g @ weight.data, g.T @ x.data), "linear")
    bias = as_tensor(bias)
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    return _result(
        out + bias.data,
        (x, weight, bias),
        lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)),
        "linear",
    )


def rowwise_dot(a, b) -> Tensor:
    """[B, d], [B, d] -> [B]."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "rowwise_dot")
    if a.ndim != 2:
        raise ShapeError("rowwise_dot expects 2-d inputs")
    return _result(
        np.einsum("bd,bd->b", a.data, b.data),
        (a, b),
        lambda g: (g[:, None] * b.data, g[:, None] * a.data),
        "rowwise_dot",
    )


def batch_matvec(m, v) -> Tensor:
    """[B, k, d], [B, d] -> [B, k]."""
    m, v = as_tensor(m), as_tensor(v)
    if m.ndim != 3 or v.ndim != 2 or m.shape[0] != v.shape[0] or m.shape[2] != v.shape[1]:
        raise ShapeError(f"batch_matvec: incompatible shapes {m.shape}, {v.shape}")
    out = np.matmul(m.data, v.data[:, :, None])[:, :, 0]

    def backward(g):
        dm = g[:, :, None] * v.data[:, None, :] if m.requires_grad else None
        return dm, np.matmul(g[:, None, :], m.data)[:, 0, :]

    return _result(out, (m, v), backward, "batch_matvec")


def l2_normalize(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm < NORM_EPS):
        raise DegenerateInputError("l2_normalize: vector with norm below 1e-12")
    y = a.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _result(y, (a,), backward, "l2_normalize")


# -- convolution and pooling ----------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(s0, s2 * stride, s3 * stride, s1, s2, s3),
        writeable=False,
    )
    return view.reshape(n * ho * wo, c * kh * kw)


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation, x [N, C, H, W] with kernel [F, C, kh, kw]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}+{padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xp = np.ascontiguousarray(xp)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernel.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dk = (g2.T @ cols).reshape(kernel.shape)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding : padding + h, padding : padding + w]
        return dx, dk

    return _result(np.ascontiguousarray(out), (x, kernel), backward, "conv2d")


def avg_pool2d(x, size: int) -> Tensor:
    """Non-overlapping average pooling with window and stride ``size``."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by window {size}")
    out = x.data.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))

    def backward(g):
        g = np.repeat(np.repeat(g, size, axis=2), size, axis=3)
        return (g / (size * size),)

    return _result(out, (x,), backward, "avg_pool2d")


def global_avg_pool(x) -> Tensor:
    """[N, C, H, W] -> [N, C]."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return _result(
        out,
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
        "global_avg_pool",
    )


def batch_norm2d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization. Train mode updates the running stats in place."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d: affine params must have shape ({c},)")
    g_ = gamma.data[None, :, None, None]
    if training:
        m = n * h * w
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * g_ + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * g_
        if training:
            dx = (
                dxhat
                - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            ) * inv_std[None, :, None, None]
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), backward, "batch_norm2d")


# -- losses -------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean categorical cross-entropy of [N, C] logits against integer class indices."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or targets.shape[0] != logits.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs {targets.shape[0]} targets")
    n, c = logits.shape
    if np.any(targets < 0) or np.any(targets >= c):
        raise ShapeError(f"softmax_cross_entropy: class index outside [0, {c})")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), targets].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        return (p * (g / n),)

    return _result(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")


def sigmoid_binary_cross_entropy(logits, targets) -> Tensor:
    """Mean (over all elements) binary cross-entropy of sigmoid(logits) against multi-hot targets."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=logits.data.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"sigmoid_binary_cross_entropy: targets {y.shape} vs logits {logits.shape}")
    x = logits.data
    # log(1 + exp(-|x|)) keeps both branches finite
    loss = (np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))).mean()

    def backward(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return ((sig - y) * (g / x.size),)

    return _result(np.asarray(loss), (logits,), backward, "sigmoid_binary_cross_entropy")


# -- serialization --------------------------------------------------------------


def _sidecar_paths(path) -> tuple:
    path = Path(path)
    return path.parent / (path.name + ".bin"), path.parent / (path.name + ".json")


def save_array(path, array: np.ndarray) -> None:
    """Write ``<path>.bin`` (raw little-endian) and ``<path>.json`` ({shape, dtype})."""
    bin_path, meta_path = _sidecar_paths(path)
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<")
    bin_path.write_bytes(np.ascontiguousarray(array, dtype=dtype).tobytes())
    meta = {"shape": list(array.shape), "dtype": np.dtype(array.dtype).name}
    meta_path.write_text(json.dumps(meta, sort_keys=True))


def load_array(path) -> np.ndarray:
    bin_path, meta_path = _sidecar_paths(path)
    meta = json.loads(meta_path.read_text())
    dtype = np.dtype(meta["dtype"]).newbyteorder("<")
    raw = bin_path.read_bytes()
    count = int(np.prod(meta["shape"], dtype=np.int64))
    if len(raw) != count * dtype.itemsize:
        raise TensorError(f"{path}: expected {count} values, file holds {len(raw) // dtype.itemsize}")
    return np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(meta["shape"])


def save_tensor(path, tensor: Tensor) -> None:
    save_array(path, tensor.data)


def load_tensor(path, requires_grad: bool = False) -> Tensor:
    data = load_array(path)
    t = Tensor(data.astype(_dtype, copy=False), requires_grad=requires_grad)
    return t
