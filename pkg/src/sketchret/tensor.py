"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 by default, float64 selectable for
gradient checking). Every operation that touches a tensor requiring
gradients records its parents and a backward closure; ``Tensor.backward``
walks the implicit graph in reverse topological order exactly once.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import CheckError, ContractError, DimensionError

_node_ids = itertools.count()

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a gradient back to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """N-dimensional array with optional gradient tracking.

    ``values`` is always a contiguous float32 or float64 numpy array.
    ``grad`` is lazily allocated; leaf gradients accumulate across
    backward passes until cleared with :func:`zero_grads`.
    """

    __slots__ = ("values", "grad", "requires_grad", "node_id", "_parents", "_bwd")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        if dtype is None:
            # float64 only when handed an explicit float64 ndarray
            keep64 = isinstance(values, np.ndarray) and values.dtype == np.float64
            dtype = np.float64 if keep64 else np.float32
        arr = np.asarray(values, dtype=dtype)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

    @classmethod
    def _from_op(cls, values: np.ndarray, parents: tuple["Tensor", ...], bwd) -> "Tensor":
        out = cls.__new__(cls)
        out.values = values
        out.grad = None
        out.node_id = next(_node_ids)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._bwd = bwd
        else:
            out.requires_grad = False
            out._parents = ()
            out._bwd = None
        return out

    # ----- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # ----- arithmetic ----------------------------------------------------

    @staticmethod
    def _coerce(other, dtype) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=dtype))

    def __add__(self, other):
        other = self._coerce(other, self.dtype)
        out_vals = self.values + other.values

        def bwd(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return Tensor._from_op(out_vals, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.values, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = self._coerce(other, self.dtype)
        out_vals = self.values - other.values

        def bwd(g):
            return _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)

        return Tensor._from_op(out_vals, (self, other), bwd)

    def __rsub__(self, other):
        return self._coerce(other, self.dtype) - self

    def __mul__(self, other):
        other = self._coerce(other, self.dtype)
        a, b = self.values, other.values

        def bwd(g):
            return _unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)

        return Tensor._from_op(a * b, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other, self.dtype)
        a, b = self.values, other.values
        out_vals = a / b

        def bwd(g):
            return (
                _unbroadcast(g / b, self.shape),
                _unbroadcast(-g * out_vals / b, other.shape),
            )

        return Tensor._from_op(out_vals, (self, other), bwd)

    def __rtruediv__(self, other):
        return self._coerce(other, self.dtype) / self

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        out_vals = self.values[key]
        shape, dtype = self.shape, self.dtype

        def bwd(g):
            gx = np.zeros(shape, dtype=dtype)
            gx[key] = g
            return (gx,)

        return Tensor._from_op(np.ascontiguousarray(out_vals), (self,), bwd)

    # ----- shape manipulation --------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out_vals = self.values.reshape(shape)
        return Tensor._from_op(out_vals, (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        out_vals = np.ascontiguousarray(self.values.transpose(axes))
        return Tensor._from_op(out_vals, (self,), lambda g: (g.transpose(inv),))

    def swap_last(self) -> "Tensor":
        """Swap the trailing two axes (matrix transpose for stacks)."""
        out_vals = np.ascontiguousarray(np.swapaxes(self.values, -1, -2))
        return Tensor._from_op(out_vals, (self,), lambda g: (np.swapaxes(g, -1, -2),))

    # ----- reductions ----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_vals = self.values.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)
            ax = axis if isinstance(axis, tuple) else (axis,)
            if not keepdims:
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

        return Tensor._from_op(np.asarray(out_vals), (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            denom = self.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            denom = int(np.prod([self.shape[a] for a in ax]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / denom)

    # ----- autodiff -------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss.

        Intermediate gradients are reset per sweep; leaf gradients
        accumulate, so two sweeps without zeroing yield exactly 2x.
        """
        if self.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node._parents:
                if p.node_id not in seen and (p.requires_grad or p._parents):
                    stack.append((p, False))
        for node in topo:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.values)
        for node in reversed(topo):
            if node._bwd is None or node.grad is None:
                continue
            grads = node._bwd(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not (parent.requires_grad or parent._parents):
                    continue
                if parent.grad is None:
                    parent.grad = g.astype(parent.dtype, copy=True)
                else:
                    parent.grad = parent.grad + g


def backward(loss: Tensor) -> None:
    """Free-function alias for ``loss.backward()``."""
    loss.backward()


def zero_grads(params) -> None:
    """Clear gradients on an iterable (or dict) of parameter tensors."""
    if isinstance(params, dict):
        params = params.values()
    for p in params:
        p.grad = None


# ----- primitive operations ------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy-style stacked broadcasting."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    av, bv = a.values, b.values

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._from_op(av @ bv, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return Tensor._from_op(np.where(mask, x.values, 0), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xv = x.values
    cdf = 0.5 * (1.0 + erf(xv * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * xv * xv) * _INV_SQRT2PI
        return (g * (cdf + xv * pdf),)

    return Tensor._from_op(xv * cdf, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    out_vals = np.sqrt(x.values)

    def bwd(g):
        # derivative is unbounded at 0; pin it to 0 there
        denom = 2.0 * out_vals
        return (np.divide(g, denom, out=np.zeros_like(g), where=denom > 0),)

    return Tensor._from_op(out_vals, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    out_vals = np.exp(x.values)
    return Tensor._from_op(out_vals, (x,), lambda g: (g * out_vals,))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis, stabilized by row-max shift."""
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(y, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine width mismatch: x has d={d}, gamma {gamma.shape}, beta {beta.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / sqrt(var + eps)
    return xc * inv * gamma + beta


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    vals = [t.values for t in tensors]
    out_vals = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._from_op(out_vals, tuple(tensors), bwd)


def gather(x: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Select along ``axis`` with ``np.take_along_axis`` semantics."""
    idx = np.asarray(index)
    out_vals = np.take_along_axis(x.values, idx, axis=axis)
    shape, dtype = x.shape, x.dtype

    def bwd(g):
        gx = np.zeros(shape, dtype=dtype)
        np.put_along_axis(gx, idx, 0, axis=axis)  # validates idx shape early
        # scatter-add (put_along_axis overwrites, so add manually)
        expanded = np.broadcast_to(idx, g.shape)
        it = np.ndindex(*g.shape)
        if gx.ndim <= 3:
            # vectorized scatter for the shapes used in this package
            grid = np.ogrid[tuple(slice(s) for s in g.shape)]
            grid = list(grid)
            grid[axis] = expanded
            np.add.at(gx, tuple(grid), g)
        else:
            for pos in it:
                tgt = list(pos)
                tgt[axis] = expanded[pos]
                gx[tuple(tgt)] += g[pos]
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out_vals), (x,), bwd)


def conv2d(x: Tensor, w: Tensor, bias: Tensor, stride: int, pad: int) -> Tensor:
    """2-d convolution (cross-correlation) with zero padding.

    ``x`` is (C_in, H, W) or batched (B, C_in, H, W); ``w`` is
    (C_out, C_in, k, k). Output spatial size follows
    floor((H + 2*pad - k) / stride) + 1.
    """
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    squeeze = x.ndim == 3
    xv = x.values[None] if squeeze else x.values
    if xv.ndim != 4:
        raise DimensionError(f"conv2d input must be 3-d or 4-d, got shape {x.shape}")
    wv, bv = w.values, bias.values
    B, C, H, W = xv.shape
    Co, Ci, k, k2 = wv.shape
    if k != k2:
        raise DimensionError(f"conv2d kernel must be square, got {wv.shape}")
    if Ci != C:
        raise DimensionError(f"conv2d channel mismatch: input {C}, kernel {Ci}")
    if H + 2 * pad < k or W + 2 * pad < k:
        raise DimensionError(
            f"kernel {k}x{k} larger than padded input {H + 2 * pad}x{W + 2 * pad}"
        )
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1

    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((B, C, k, k, Ho, Wo), dtype=xv.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    cols2 = cols.reshape(B, C * k * k, Ho * Wo)
    out = (wv.reshape(Co, -1) @ cols2).reshape(B, Co, Ho, Wo) + bv.reshape(1, Co, 1, 1)
    if squeeze:
        out = out[0]

    def bwd(g):
        gv = g[None] if squeeze else g
        gflat = gv.reshape(B, Co, Ho * Wo)
        gw = np.einsum("bct,bkt->ck", gflat, cols2).reshape(wv.shape)
        gb = gv.sum(axis=(0, 2, 3))
        gcols = (wv.reshape(Co, -1).T @ gflat).reshape(B, C, k, k, Ho, Wo)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[
                    :, :, i, j
                ]
        gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        if squeeze:
            gx = gx[0]
        return np.ascontiguousarray(gx), gw, gb

    return Tensor._from_op(np.ascontiguousarray(out), (x, w, bias), bwd)


# ----- gradient checking -----------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def __str__(self) -> str:
        lines = [
            f"  {'PASS' if e.passed else 'FAIL'}  {e.name}: max rel err {e.max_rel_err:.3e}"
            for e in self.entries
        ]
        return "\n".join(lines)


def grad_check(
    f,
    inputs: dict[str, Tensor],
    tol: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(inputs)`` to central differences.

    Step size is cbrt(machine eps) * max(1, |x|) per element. When
    ``max_elements`` is set, a seeded random subset of each tensor's
    elements is probed (the analytic side is always exact and full).
    """
    out1 = f(inputs)
    out2 = f(inputs)
    if not np.array_equal(out1.values, out2.values):
        raise CheckError("function under test is not deterministic")

    zero_grads(inputs)
    loss = f(inputs)
    loss.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.values))
        for name, t in inputs.items()
        if t.requires_grad
    }

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name, t in inputs.items():
        if not t.requires_grad:
            continue
        flat = t.values.reshape(-1)
        n = flat.size
        if max_elements is not None and n > max_elements:
            idxs = rng.choice(n, size=max_elements, replace=False)
        else:
            idxs = np.arange(n)
        eps = np.finfo(t.dtype).eps
        max_err = 0.0
        ana = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            h = np.cbrt(eps) * max(1.0, abs(orig))
            flat[i] = orig + h
            fp = f(inputs).item()
            flat[i] = orig - h
            fm = f(inputs).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = float(ana[i])
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            max_err = max(max_err, err)
        report.entries.append(GradCheckEntry(name, max_err, max_err <= tol))
    return report
