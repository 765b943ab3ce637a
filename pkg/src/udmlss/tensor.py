"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a C-contiguous numpy array. Operations build a
graph of closures; :meth:`Tensor.backward` walks it in reverse
topological order and accumulates into ``.grad`` of every leaf that
requires gradients.

Only the ops needed by the network and the losses live here. There is no
general broadcasting: elementwise ops demand equal shapes and the only
implicit expansion is a bias added along the last (or channel) axis.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, NumericError


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Within this block new ops record no graph."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported dtype {arr.dtype}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data)
        out.grad = None
        out.name = None
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, c):
        if isinstance(c, Tensor):
            return mul(self, c)
        return scale(self, c)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
                if not np.all(np.isfinite(node.grad)):
                    raise NumericError(f"non-finite gradient for leaf {node.name or node.shape}")
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return Tensor._wrap(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return Tensor._wrap(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._wrap(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def tsum(a: Tensor) -> Tensor:
    return Tensor._wrap(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, g, dtype=a.dtype),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._wrap(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return Tensor._wrap(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten_rows(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def take_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice ``x[start:stop]``."""

    def back(g):
        out = np.zeros_like(x.data)
        out[start:stop] = g
        return (out,)

    return Tensor._wrap(x.data[start:stop], (x,), back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.shape[0] for p in parts]
    tails = {p.shape[1:] for p in parts}
    if len(tails) != 1:
        raise DimensionError(f"concat_rows: trailing shapes {sorted(tails)} differ")
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return Tensor._wrap(np.concatenate([p.data for p in parts], axis=0), tuple(parts), back)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    return Tensor._wrap(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for x [n, d_in], w [d_in, d_out], b [d_out]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: x {x.shape} and w {w.shape} do not chain")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match w {w.shape}")
    out = x.data @ w.data + b.data

    def back(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return Tensor._wrap(out, (x, w, b), back)


def gram(x: Tensor) -> Tensor:
    """``x @ x.T`` made exactly symmetric by mirroring the upper triangle."""
    if x.ndim != 2:
        raise DimensionError(f"gram: expected a matrix, got {x.shape}")
    full = x.data @ x.data.T
    upper = np.triu(full)
    out = upper + np.triu(full, 1).T

    def back(g):
        return ((g + g.T) @ x.data,)

    return Tensor._wrap(out, (x,), back)


# ---------------------------------------------------------------- convolution

def conv_out_extent(size: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - 3) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0, bias: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation of x [n, c_in, h, w] with kernel [c_out, c_in, 3, 3]."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be 4-d, got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3) or kernel.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d: kernel {kernel.shape} incompatible with input {x.shape}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d: bad stride {stride} / pad {pad}")
    n, c, h, w = x.shape
    c_out = kernel.shape[0]
    oh, ow = conv_out_extent(h, stride, pad), conv_out_extent(w, stride, pad)
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d: output extent {oh}x{ow} from input {x.shape}, stride {stride}, pad {pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    xp = np.ascontiguousarray(xp)
    cols = kernels.im2col3x3(xp, stride, oh, ow).reshape(n * oh * ow, c * 9)
    kmat = kernel.data.reshape(c_out, c * 9)
    out = cols @ kmat.T
    if bias is not None:
        if bias.shape != (c_out,):
            raise DimensionError(f"conv2d: bias {bias.shape} does not match {c_out} channels")
        out = out + bias.data
    out = out.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, c_out)
        dk = (g2.T @ cols).reshape(kernel.shape)
        dcols = np.ascontiguousarray((g2 @ kmat).reshape(n, oh, ow, c * 9))
        dxp = kernels.col2im3x3(dcols, c, h + 2 * pad, w + 2 * pad, stride)
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._wrap(out, parents, back)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of x [n, c, h, w] -> [n, c]."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: input must be 4-d, got {x.shape}")
    n, c, h, w = x.shape
    inv = x.dtype.type(1.0 / (h * w))

    def back(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], x.shape).copy(),)

    return Tensor._wrap(x.data.mean(axis=(2, 3)), (x,), back)


# ---------------------------------------------------------------- normalisation and losses

def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize_rows: expected a matrix, got {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, x.dtype.type(eps))
    y = x.data / denom

    def back(g):
        proj = (g * y).sum(axis=1, keepdims=True)
        return (np.where(big, (g - y * proj) / denom, g / denom),)

    return Tensor._wrap(y, (x,), back)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: expected a matrix, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if t.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: {t.shape[0] if t.ndim else t} targets for {n} rows")
    if n and (t.min() < 0 or t.max() >= c):
        raise IndexError(f"target outside [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, t]).mean()

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1
        return (p * (g / n),)

    return Tensor._wrap(np.asarray(loss, dtype=logits.dtype), (logits,), back)


# ---------------------------------------------------------------- verification

def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the analytic and central-difference gradient.

    ``fn`` maps a tensor to a scalar tensor and must be deterministic. The
    per-coordinate error is ``|a - n| / max(1, |a|, |n|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    leaf = Tensor(x.data, requires_grad=True)
    out = fn(leaf)
    if not math.isfinite(out.item()):
        raise NumericError("grad_check: non-finite function value")
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    base = x.data.copy()
    flat = base.reshape(-1)
    worst = 0.0
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        fp = fn(Tensor(base)).item()
        flat[idx] = orig - h
        fm = fn(Tensor(base)).item()
        flat[idx] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"grad_check: non-finite value at coordinate {idx}")
        num = (fp - fm) / (2 * h)
        a = float(analytic.reshape(-1)[idx])
        worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst


def grad_check_many(fn: Callable[[], Tensor], leaves: Iterable[Tensor], h: float = 1e-5) -> float:
    """Like :func:`grad_check` for a closure over several leaf tensors.

    Each leaf is perturbed in place; ``fn`` must read them on every call.
    """
    leaves = list(leaves)
    for t in leaves:
        t.requires_grad = True
        t.grad = None
    out = fn()
    out.backward()
    worst = 0.0
    for t in leaves:
        analytic = t.grad.reshape(-1) if t.grad is not None else np.zeros(t.data.size)
        t.requires_grad = False
        flat = t.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = fn().item()
            flat[idx] = orig - h
            fm = fn().item()
            flat[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"grad_check: non-finite value at coordinate {idx}")
            num = (fp - fm) / (2 * h)
            a = float(analytic[idx])
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
        t.requires_grad = True
    return worst
