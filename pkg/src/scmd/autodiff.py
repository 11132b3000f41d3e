"""Reverse-mode differentiation on a per-run tape.

The op set is deliberately small: exactly what an MLP student plus the
distillation losses need. All math is float64. A ``Tape`` owns the ops it
recorded; leaf tensors (parameters, inputs) are tape-free and may be reused
across tapes, but one tape must never consume another tape's intermediate.
"""

from __future__ import annotations

import numpy as np

from ._kernels import backend as K
from .errors import (
    ContractError,
    DegenerateVectorError,
    DimensionError,
    DomainError,
    ParameterError,
)

# Below this L2 norm a vector is treated as degenerate rather than silently
# regularized, so collapsed projector outputs surface as errors.
EPS_NORM = 1e-12


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    ``grad`` accumulates across ``backward`` calls until ``zero_grad``;
    calling backward twice without a reset doubles the gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad=False):
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

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.reshape(self.data.shape)

    def __repr__(self):
        return f"Tensor(shape={list(self.data.shape)}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out, inputs, grad_fn):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


def _as_index_array(idx, n_rows, what="index"):
    arr = np.asarray(idx, dtype=np.int64)
    if arr.ndim != 1:
        raise ParameterError(f"{what} array must be 1-D, got shape {list(arr.shape)}")
    if arr.size and (arr.min() < 0 or arr.max() >= n_rows):
        raise ParameterError(f"{what} out of range [0, {n_rows}): {arr.tolist()}")
    return np.ascontiguousarray(arr)


class Tape:
    """Ordered record of executed ops; replayed in reverse by ``backward``."""

    def __init__(self):
        self._nodes = []

    def __len__(self):
        return len(self._nodes)

    # -- bookkeeping --

    def _own(self, *tensors):
        for t in tensors:
            if t.tape is not None and t.tape is not self:
                raise ContractError("tensor belongs to a different tape")

    def _emit(self, data, inputs, grad_fn):
        out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
        out.tape = self
        if out.requires_grad:
            self._nodes.append(_Node(out, inputs, grad_fn))
        return out

    @staticmethod
    def _wrap(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    # -- primitives --

    def matmul(self, a, b):
        a, b = self._wrap(a), self._wrap(b)
        self._own(a, b)
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(
                f"matmul shapes incompatible: {list(a.shape)} x {list(b.shape)}"
            )
        data = K.matmul(a.data, b.data)

        def grad_fn(g):
            ga = K.matmul_grad_a(g, b.data) if a.requires_grad else None
            gb = K.matmul_grad_b(a.data, g) if b.requires_grad else None
            return ga, gb

        return self._emit(data, (a, b), grad_fn)

    def add(self, a, b):
        a, b = self._wrap(a), self._wrap(b)
        self._own(a, b)
        if a.shape == b.shape:
            data = K.ewise_add(a.data.ravel(), b.data.ravel()).reshape(a.shape)

            def grad_fn(g):
                return g, g

        elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
            data = K.add_bias(a.data, b.data)

            def grad_fn(g):
                gb = K.bias_grad(g) if b.requires_grad else None
                return g, gb

        else:
            raise DimensionError(f"add shapes incompatible: {list(a.shape)} + {list(b.shape)}")
        return self._emit(data, (a, b), grad_fn)

    def sub(self, a, b):
        a, b = self._wrap(a), self._wrap(b)
        self._own(a, b)
        if a.shape != b.shape:
            raise DimensionError(f"sub shapes incompatible: {list(a.shape)} - {list(b.shape)}")
        data = K.ewise_sub(a.data.ravel(), b.data.ravel()).reshape(a.shape)

        def grad_fn(g):
            return g, -g

        return self._emit(data, (a, b), grad_fn)

    def mul(self, a, b):
        a, b = self._wrap(a), self._wrap(b)
        self._own(a, b)
        if a.shape != b.shape:
            raise DimensionError(f"mul shapes incompatible: {list(a.shape)} * {list(b.shape)}")
        data = K.ewise_mul(a.data.ravel(), b.data.ravel()).reshape(a.shape)

        def grad_fn(g):
            ga = (g.ravel() * b.data.ravel()).reshape(a.shape) if a.requires_grad else None
            gb = (g.ravel() * a.data.ravel()).reshape(b.shape) if b.requires_grad else None
            return ga, gb

        return self._emit(data, (a, b), grad_fn)

    def mul_scalar(self, a, c):
        a = self._wrap(a)
        self._own(a)
        c = float(c)
        if not np.isfinite(c):
            raise ParameterError(f"scalar must be finite, got {c}")
        data = K.scalar_mul(a.data.ravel(), c).reshape(a.shape)

        def grad_fn(g):
            return (g * c,)

        return self._emit(data, (a,), grad_fn)

    def relu(self, a):
        a = self._wrap(a)
        self._own(a)
        data = K.relu(a.data.ravel()).reshape(a.shape)

        def grad_fn(g):
            # subgradient at exactly 0 is fixed to 0
            return (K.relu_grad(a.data.ravel(), g.ravel()).reshape(a.shape),)

        return self._emit(data, (a,), grad_fn)

    def log(self, a):
        a = self._wrap(a)
        self._own(a)
        if a.data.size and a.data.min() <= 0.0:
            raise DomainError(f"log requires strictly positive input, min was {a.data.min()}")
        data = K.log(a.data.ravel()).reshape(a.shape)

        def grad_fn(g):
            return (K.log_grad(a.data.ravel(), g.ravel()).reshape(a.shape),)

        return self._emit(data, (a,), grad_fn)

    def sum(self, a):
        a = self._wrap(a)
        self._own(a)
        data = np.asarray(K.reduce_sum(a.data.ravel()))

        def grad_fn(g):
            return (np.full(a.shape, float(g)),)

        return self._emit(data, (a,), grad_fn)

    def mean(self, a):
        a = self._wrap(a)
        self._own(a)
        if a.size == 0:
            raise ParameterError("mean of empty tensor")
        n = a.size
        data = np.asarray(K.reduce_sum(a.data.ravel()) / n)

        def grad_fn(g):
            return (np.full(a.shape, float(g) / n),)

        return self._emit(data, (a,), grad_fn)

    def row_sum(self, a):
        a = self._wrap(a)
        self._own(a)
        if a.data.ndim != 2:
            raise DimensionError(f"row_sum expects a matrix, got shape {list(a.shape)}")
        data = K.row_sum(a.data)

        def grad_fn(g):
            return (np.repeat(g[:, None], a.shape[1], axis=1),)

        return self._emit(data, (a,), grad_fn)

    def gather_rows(self, a, idx):
        a = self._wrap(a)
        self._own(a)
        if a.data.ndim != 2:
            raise DimensionError(f"gather_rows expects a matrix, got shape {list(a.shape)}")
        idx = _as_index_array(idx, a.shape[0], "row index")
        data = K.gather_rows(a.data, idx)

        def grad_fn(g):
            ga = np.zeros_like(a.data)
            K.scatter_rows_add(ga, idx, g)
            return (ga,)

        return self._emit(data, (a,), grad_fn)

    def take_per_row(self, a, idx):
        a = self._wrap(a)
        self._own(a)
        if a.data.ndim != 2:
            raise DimensionError(f"take_per_row expects a matrix, got shape {list(a.shape)}")
        if len(idx) != a.shape[0]:
            raise DimensionError(
                f"take_per_row needs one index per row: {len(idx)} for {a.shape[0]} rows"
            )
        idx = _as_index_array(idx, a.shape[1], "column index")
        data = K.take_per_row(a.data, idx)

        def grad_fn(g):
            ga = np.zeros_like(a.data)
            K.put_per_row_add(ga, idx, g)
            return (ga,)

        return self._emit(data, (a,), grad_fn)

    def _rows(self, a, opname):
        if a.data.ndim == 1:
            return a.data[None, :], True
        if a.data.ndim == 2:
            return a.data, False
        raise DimensionError(f"{opname} expects a vector or matrix, got shape {list(a.shape)}")

    def softmax_t(self, a, t):
        a = self._wrap(a)
        self._own(a)
        t = float(t)
        if t <= 0.0:
            raise ParameterError(f"temperature must be > 0, got {t}")
        z, squeeze = self._rows(a, "softmax_t")
        y = K.softmax_rows(z, t)
        data = y[0] if squeeze else y

        def grad_fn(g):
            g2 = g[None, :] if squeeze else g
            dz = K.softmax_rows_grad(y, np.ascontiguousarray(g2), t)
            return (dz[0] if squeeze else dz,)

        return self._emit(data, (a,), grad_fn)

    def log_softmax_t(self, a, t):
        a = self._wrap(a)
        self._own(a)
        t = float(t)
        if t <= 0.0:
            raise ParameterError(f"temperature must be > 0, got {t}")
        z, squeeze = self._rows(a, "log_softmax_t")
        lp = K.log_softmax_rows(z, t)
        data = lp[0] if squeeze else lp

        def grad_fn(g):
            g2 = g[None, :] if squeeze else g
            dz = K.log_softmax_rows_grad(lp, np.ascontiguousarray(g2), t)
            return (dz[0] if squeeze else dz,)

        return self._emit(data, (a,), grad_fn)

    def l2_normalize(self, a):
        a = self._wrap(a)
        self._own(a)
        v, squeeze = self._rows(a, "l2_normalize")
        sq_norms = (v * v).sum(axis=1)
        if sq_norms.min() <= EPS_NORM * EPS_NORM:
            row = int(sq_norms.argmin())
            raise DegenerateVectorError(
                f"cannot normalize row {row}: norm {np.sqrt(sq_norms[row]):.3e} <= {EPS_NORM}"
            )
        u, norms = K.l2_normalize_rows(v)
        data = u[0] if squeeze else u

        def grad_fn(g):
            g2 = g[None, :] if squeeze else g
            dv = K.l2_normalize_rows_grad(u, norms, np.ascontiguousarray(g2))
            return (dv[0] if squeeze else dv,)

        return self._emit(data, (a,), grad_fn)


def backward(loss):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    pending = {id(loss): [loss, np.ones_like(loss.data)]}
    nodes = loss.tape._nodes if loss.tape is not None else []
    for node in reversed(nodes):
        entry = pending.pop(id(node.out), None)
        if entry is None:
            continue
        out, g = entry
        out._accumulate(g)
        for inp, gi in zip(node.inputs, node.grad_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = pending.get(id(inp))
            if prev is None:
                pending[id(inp)] = [inp, np.array(gi, dtype=np.float64)]
            else:
                prev[1] += gi
    for t, g in pending.values():
        if t.requires_grad:
            t._accumulate(g)


def finite_diff_check(f, x, eps=1e-4):
    """Max relative error between the analytic gradient of ``f`` at ``x`` and
    central differences; reports, never raises on mismatch.

    ``f`` takes a Tensor and returns a scalar Tensor, building its own tape.
    """
    leaf = Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
                  requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)).ravel()

    probe = leaf.data.copy()
    flat = probe.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(probe)).data)
        flat[i] = orig - eps
        lo = float(f(Tensor(probe)).data)
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        if err > worst:
            worst = err
    return worst
