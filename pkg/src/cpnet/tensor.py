"""Minimal reverse-mode autodiff over numpy arrays.

Only the primitives the U-Net / CPNet predictors need are provided: 2-D
convolution and its transpose, ReLU, tanh, 2x2 max pooling, channel
concat/split and a handful of elementwise helpers for the loss.

Tensors use the NCHW layout. Broadcasting is deliberately unsupported
(the only implicit broadcast is a conv bias over channels).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class GraphReuseError(RuntimeError):
    """Raised when backward runs through a graph that was already consumed."""


class _Node:
    __slots__ = ("parents", "backward_fn", "name", "consumed")

    def __init__(self, parents, backward_fn, name):
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.consumed = False


class Tensor:
    """Dense array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    # -- introspection -------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    # -- autodiff ------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every reachable leaf that requires grad.

        The graph is consumed: a second call (or any later backward that
        reaches one of its nodes) raises :class:`GraphReuseError`. Leaf
        gradients accumulate across *distinct* graphs; callers reset them.
        """
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")
        order = _topo_order(self)
        for t in order:
            if t._node is not None and t._node.consumed:
                raise GraphReuseError(
                    f"graph already consumed at op '{t._node.name}'; rebuild it before calling backward"
                )
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            node = t._node
            if node is None:
                if g is not None and t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            if g is not None:
                for parent, pg in zip(node.parents, node.backward_fn(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node.consumed = True
            node.backward_fn = None


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def custom_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    name: str = "custom",
) -> Tensor:
    """Wrap a forward result and its backward rule into a graph node.

    ``backward`` receives the output gradient and returns one gradient (or
    None) per parent, in order.
    """
    parents = tuple(parents)
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if req:
        out.requires_grad = True
        out._node = _Node(parents, backward, name)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------------
# elementwise helpers
# ----------------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return custom_op(a.data + b, (a,), lambda g: (g,), "add_scalar")
    _check_same_shape(a, b, "add")
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return custom_op(a.data - b, (a,), lambda g: (g,), "sub_scalar")
    _check_same_shape(a, b, "sub")
    return custom_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return custom_op(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def tsum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return custom_op(
        np.asarray(a.data.sum(), dtype=dtype), (a,), lambda g: (np.full(shape, g, dtype=dtype),), "sum"
    )


def tmean(a: Tensor) -> Tensor:
    shape, dtype, n = a.shape, a.dtype, a.size
    return custom_op(
        np.asarray(a.data.mean(), dtype=dtype), (a,), lambda g: (np.full(shape, g / n, dtype=dtype),), "mean"
    )


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    return custom_op(y, (x,), lambda g: (g * (y > 0),), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return custom_op(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


# ----------------------------------------------------------------------
# pooling
# ----------------------------------------------------------------------


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties go to the first index in row-major window order."""
    if x.ndim != 4:
        raise ValueError(f"maxpool2d expects NCHW input, got shape {x.shape}")
    b, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"maxpool2d: spatial dims {h}x{w} not divisible by {size}")
    ho, wo = h // size, w // size
    win = x.data.reshape(b, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, size * size)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        mask = np.arange(size * size) == idx[..., None]
        gw = mask * g[..., None]
        gx = gw.reshape(b, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gx.astype(g.dtype, copy=False),)

    return custom_op(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


# ----------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B, C*k*k, ho*wo), rows ordered (c, ki, kj)."""
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`; accumulates overlapping taps in a fixed order."""
    b, c, hp, wp = shape
    cols = cols.reshape(b, c, k, k, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, :, i, j]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_checks(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, padding: int, cin_axis: int, op: str):
    if x.ndim != 4:
        raise ValueError(f"{op}: input must be 4-D (B, C, H, W), got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"{op}: weight must be 4-D with square kernel, got shape {weight.shape}")
    if stride < 1:
        raise ValueError(f"{op}: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"{op}: padding must be >= 0, got {padding}")
    if weight.shape[cin_axis] != x.shape[1]:
        raise ValueError(
            f"{op}: input has C_in={x.shape[1]} but weight {weight.shape} expects C_in={weight.shape[cin_axis]}"
        )
    cout = weight.shape[1 - cin_axis]
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"{op}: bias shape {bias.shape} does not match C_out={cout}")
    if x.dtype != weight.dtype:
        raise ValueError(f"{op}: dtype mismatch input {x.dtype} vs weight {weight.dtype}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with weight of shape (C_out, C_in, K, K)."""
    _conv_checks(x, weight, bias, stride, padding, 1, "conv2d")
    b, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    if k % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got K={k}")
    span_h, span_w = h + 2 * padding - k, w + 2 * padding - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ValueError(
            f"conv2d: output size not integral for H={h}, W={w}, K={k}, padding={padding}, stride={stride}"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1
    xp = _pad(x.data, padding)
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(b, cout, ho, wo)
    pshape = xp.shape

    def backward(g):
        go = g.reshape(b, cout, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, go)
            gxp = _col2im(gcols, pshape, k, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return custom_op(out, parents, backward, "conv2d")


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution with weight of shape (C_in, C_out, K, K).

    Output spatial size is ``(H - 1) * stride - 2 * padding + K``.
    """
    _conv_checks(x, weight, bias, stride, padding, 0, "conv_transpose2d")
    b, cin, h, w = x.shape
    _, cout, k, _ = weight.shape
    hf, wf = (h - 1) * stride + k, (w - 1) * stride + k
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv_transpose2d: padding {padding} too large for H={h}, W={w}, K={k}")
    xm = x.data.reshape(b, cin, h * w)
    wmat = weight.data.reshape(cin, cout * k * k)
    cols = np.matmul(wmat.T, xm)
    full = _col2im(cols, (b, cout, hf, wf), k, stride, h, w)
    out = full[:, :, padding : padding + ho, padding : padding + wo] if padding else full
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gcols = _im2col(_pad(g, padding), k, stride, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(wmat, gcols).reshape(x.shape)
        if weight.requires_grad:
            gw = np.matmul(xm, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return custom_op(out, parents, backward, "conv_transpose2d")


# ----------------------------------------------------------------------
# channel plumbing
# ----------------------------------------------------------------------


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat_channels: need at least one tensor")
    ref = parts[0].shape
    for i, p in enumerate(parts):
        if p.ndim != 4:
            raise ValueError(f"concat_channels: part {i} is not 4-D (shape {p.shape})")
        if (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ValueError(f"concat_channels: part {i} has shape {p.shape}, incompatible B/H/W with {ref}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return custom_op(out, parts, backward, "concat")


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    sizes = [int(s) for s in sizes]
    if x.ndim != 4:
        raise ValueError(f"split_channels: input must be 4-D, got shape {x.shape}")
    if any(s <= 0 for s in sizes) or sum(sizes) != x.shape[1]:
        raise ValueError(f"split_channels: sizes {sizes} do not sum to C={x.shape[1]}")
    outs = []
    start = 0
    for s in sizes:
        lo, hi = start, start + s

        def backward(g, lo=lo, hi=hi):
            gx = np.zeros_like(x.data)
            gx[:, lo:hi] = g
            return (gx,)

        outs.append(custom_op(np.ascontiguousarray(x.data[:, lo:hi]), (x,), backward, "split"))
        start = hi
    return outs


# ----------------------------------------------------------------------
# finite-difference checking
# ----------------------------------------------------------------------


@dataclass
class GradcheckReport:
    passed: bool
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    worst_index: tuple | None = None

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: max rel err {self.max_rel_error:.3e}, "
            f"max abs err {self.max_abs_error:.3e} over {self.n_checked} coords"
        )


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradcheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``
    where ``floor`` is 1e-3 of the largest numeric gradient magnitude, so
    coordinates with near-zero gradient are judged on the overall scale.
    With ``max_coords`` set, that many coordinates per input are sampled.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = f(*inputs)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    records = []
    with no_grad():
        for ti, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            if not flat.flags.writeable or not np.shares_memory(flat, t.data):
                raise ValueError("gradcheck needs contiguous writable inputs")
            n = flat.size
            idxs = np.arange(n) if max_coords is None or max_coords >= n else rng.choice(n, max_coords, replace=False)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                records.append((ti, int(i), float(analytic[ti].reshape(-1)[i]), num))
    for t in inputs:
        t.grad = None
    if not records:
        return GradcheckReport(True, 0.0, 0.0, 0)
    a = np.array([r[2] for r in records])
    num = np.array([r[3] for r in records])
    floor = max(1e-3 * float(np.abs(num).max()), 1e-12)
    abs_err = np.abs(a - num)
    rel = abs_err / np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
    worst = int(rel.argmax())
    return GradcheckReport(
        passed=bool(rel.max() < tol),
        max_rel_error=float(rel.max()),
        max_abs_error=float(abs_err.max()),
        n_checked=len(records),
        worst_index=records[worst][:2],
    )
