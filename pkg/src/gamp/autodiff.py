"""Reverse-mode differentiation on numpy arrays, plus Adam and a
finite-difference checker.

The tape is a plain DAG of :class:`Node` objects; each op records its local
vector-Jacobian products as closures.  ``grad`` walks the graph once in
reverse topological order, so repeated backward passes over the same graph
are bit-identical.  Ops follow numpy broadcasting; gradients are
un-broadcast back onto the operand shapes.

Matrix ops that factor their input (``cholesky``, ``solve_psd``,
``logdet_psd``, ``sym_expm``) assume the input is produced symmetrically
upstream (e.g. as S @ S.T or through ``sym_from_tril``); their gradients are
correct for any such construction.
"""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .errors import NumericalError, ValidationError


_UID = itertools.count(1)  # atomic in CPython, safe across threads


class Node:
    """One value in the computation graph.

    Nodes are created in topological order (operands before results), so the
    creation id doubles as a reverse-pass schedule.
    """

    __slots__ = ("value", "parents", "tag", "uid")

    def __init__(self, value, parents=(), tag="leaf"):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents
        self.tag = tag
        self.uid = next(_UID)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x, tag="const")


def constant(x) -> Node:
    return Node(x, tag="const")


def stop_gradient(x: Node) -> Node:
    """Detach: same value, no parents, zero adjoint upstream."""
    return Node(as_node(x).value, tag="stop_gradient")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = as_node(a), as_node(b)
    return Node(a.value + b.value,
                ((a, lambda g: _unbroadcast(g, a.value.shape)),
                 (b, lambda g: _unbroadcast(g, b.value.shape))), "add")


def sub(a, b):
    a, b = as_node(a), as_node(b)
    return Node(a.value - b.value,
                ((a, lambda g: _unbroadcast(g, a.value.shape)),
                 (b, lambda g: _unbroadcast(-g, b.value.shape))), "sub")


def mul(a, b):
    a, b = as_node(a), as_node(b)
    return Node(a.value * b.value,
                ((a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
                 (b, lambda g: _unbroadcast(g * a.value, b.value.shape))), "mul")


def div(a, b):
    a, b = as_node(a), as_node(b)
    inv = 1.0 / b.value
    out = a.value * inv
    return Node(out,
                ((a, lambda g: _unbroadcast(g * inv, a.value.shape)),
                 (b, lambda g: _unbroadcast(-g * out * inv, b.value.shape))), "div")


def neg(a):
    a = as_node(a)
    return Node(-a.value, ((a, lambda g: -g),), "neg")


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    va, vb = a.value, b.value
    out = va @ vb

    if va.ndim == 1 and vb.ndim == 1:
        vjp_a = lambda g: g * vb
        vjp_b = lambda g: g * va
    elif vb.ndim == 1:
        vjp_a = lambda g: _unbroadcast(g[..., None] * vb, va.shape)
        vjp_b = lambda g: np.einsum("...mk,...m->k", va, g)
    elif va.ndim == 1:
        vjp_a = lambda g: np.einsum("...kn,...n->k", vb, g)
        vjp_b = lambda g: _unbroadcast(va[:, None] * g[..., None, :], vb.shape)
    else:
        vjp_a = lambda g: _unbroadcast(g @ np.swapaxes(vb, -1, -2), va.shape)
        vjp_b = lambda g: _unbroadcast(np.swapaxes(va, -1, -2) @ g, vb.shape)
    return Node(out, ((a, vjp_a), (b, vjp_b)), "matmul")


# ----------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims=False):
    a = as_node(a)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            for i in sorted(ax % np.array(a.value.ndim)):
                g = np.expand_dims(g, int(i))
        return np.broadcast_to(g, a.value.shape).copy()

    return Node(a.value.sum(axis=axis, keepdims=keepdims), ((a, vjp),), "sum")


def mean(a, axis=None, keepdims=False):
    a = as_node(a)
    count = a.value.size if axis is None else np.prod(
        [a.value.shape[i] for i in np.atleast_1d(axis)])
    return div(sum_(a, axis=axis, keepdims=keepdims), float(count))


# ----------------------------------------------------------------- shape ops

def getitem(a, key):
    a = as_node(a)

    def vjp(g):
        buf = np.zeros_like(a.value)
        np.add.at(buf, key, g)
        return buf

    return Node(a.value[key], ((a, vjp),), "getitem")


def reshape(a, shape):
    a = as_node(a)
    return Node(a.value.reshape(shape), ((a, lambda g: g.reshape(a.value.shape)),), "reshape")


def swapaxes(a, ax1, ax2):
    a = as_node(a)
    return Node(np.swapaxes(a.value, ax1, ax2),
                ((a, lambda g: np.swapaxes(g, ax1, ax2)),), "swapaxes")


def transpose_last(a):
    return swapaxes(a, -1, -2)


def concat(nodes, axis=-1):
    nodes = [as_node(n) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    parents = []
    for i, n in enumerate(nodes):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g, lo=lo, hi=hi):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        parents.append((n, vjp))
    return Node(np.concatenate([n.value for n in nodes], axis=axis), tuple(parents), "concat")


def stack(nodes, axis=0):
    nodes = [as_node(n) for n in nodes]
    parents = tuple((n, (lambda g, i=i: np.take(g, i, axis=axis))) for i, n in enumerate(nodes))
    return Node(np.stack([n.value for n in nodes], axis=axis), parents, "stack")


def where(cond, a, b):
    """Branch select with a constant condition; gradients flow per branch."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_node(a), as_node(b)
    return Node(np.where(cond, a.value, b.value),
                ((a, lambda g: _unbroadcast(np.where(cond, g, 0.0), a.value.shape)),
                 (b, lambda g: _unbroadcast(np.where(cond, 0.0, g), b.value.shape))), "where")


# ----------------------------------------------------------------- elementwise

def tanh(a):
    a = as_node(a)
    out = np.tanh(a.value)
    return Node(out, ((a, lambda g: g * (1.0 - out * out)),), "tanh")


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)
    return Node(out, ((a, lambda g: g * out),), "exp")


def log(a):
    a = as_node(a)
    return Node(np.log(a.value), ((a, lambda g: g / a.value),), "log")


def sin(a):
    a = as_node(a)
    return Node(np.sin(a.value), ((a, lambda g: g * np.cos(a.value)),), "sin")


def cos(a):
    a = as_node(a)
    return Node(np.cos(a.value), ((a, lambda g: -g * np.sin(a.value)),), "cos")


def softplus(a):
    a = as_node(a)
    out = np.logaddexp(0.0, a.value)
    return Node(out, ((a, lambda g: g * expit(a.value)),), "softplus")


def sigmoid(a):
    a = as_node(a)
    out = expit(a.value)
    return Node(out, ((a, lambda g: g * out * (1.0 - out)),), "sigmoid")


def logsumexp(a, axis=-1, keepdims=False):
    a = as_node(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a.value - m), axis=axis, keepdims=True))
    softmax = np.exp(a.value - out)
    squeezed = out if keepdims else np.squeeze(out, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return g * softmax

    return Node(squeezed, ((a, vjp),), "logsumexp")


def logaddexp(a, b):
    a, b = as_node(a), as_node(b)
    out = np.logaddexp(a.value, b.value)
    wa = np.exp(a.value - out)
    wb = np.exp(b.value - out)
    return Node(out,
                ((a, lambda g: _unbroadcast(g * wa, a.value.shape)),
                 (b, lambda g: _unbroadcast(g * wb, b.value.shape)),), "logaddexp")


# ----------------------------------------------------------------- matrix ops

def _tril_half_diag(x):
    out = np.tril(x)
    idx = np.arange(x.shape[-1])
    out[..., idx, idx] *= 0.5
    return out


def cholesky(a):
    """Lower Cholesky factor of an SPD matrix (batched over leading dims)."""
    a = as_node(a)
    try:
        low = np.linalg.cholesky(a.value)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("cholesky of a non-PD matrix") from exc
    low_inv = np.linalg.inv(low)

    def vjp(g):
        p = _tril_half_diag(np.swapaxes(low, -1, -2) @ g)
        abar = np.swapaxes(low_inv, -1, -2) @ p @ low_inv
        return 0.5 * (abar + np.swapaxes(abar, -1, -2))

    return Node(low, ((a, vjp),), "cholesky")


def solve_psd(a, b):
    """x = A^{-1} B via the Cholesky factor; B must carry matrix shape
    (..., k, m).  Use :func:`solve_psd_vec` for vector right-hand sides."""
    a, b = as_node(a), as_node(b)
    try:
        low = np.linalg.cholesky(a.value)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("solve_psd with a non-PD matrix") from exc
    x = np.linalg.solve(np.swapaxes(low, -1, -2), np.linalg.solve(low, b.value))

    def vjp_b(g):
        bbar = np.linalg.solve(np.swapaxes(low, -1, -2), np.linalg.solve(low, g))
        return _unbroadcast(bbar, b.value.shape)

    def vjp_a(g):
        bbar = np.linalg.solve(np.swapaxes(low, -1, -2), np.linalg.solve(low, g))
        return _unbroadcast(-bbar @ np.swapaxes(x, -1, -2), a.value.shape)

    return Node(x, ((a, vjp_a), (b, vjp_b)), "solve_psd")


def solve_psd_vec(a, b):
    """x = A^{-1} b for a vector (possibly batched) right-hand side."""
    b = as_node(b)
    col = solve_psd(a, reshape(b, b.shape + (1,)))
    return reshape(col, col.shape[:-1])


def logdet_psd(a):
    """log det of an SPD matrix (batched); gradient is the inverse."""
    a = as_node(a)
    try:
        low = np.linalg.cholesky(a.value)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("logdet of a non-PD matrix") from exc
    idx = np.arange(a.value.shape[-1])
    out = 2.0 * np.sum(np.log(low[..., idx, idx]), axis=-1)
    low_inv = np.linalg.inv(low)
    inv = np.swapaxes(low_inv, -1, -2) @ low_inv
    return Node(out, ((a, lambda g: g[..., None, None] * inv),), "logdet_psd")


def sym_expm(a):
    """Matrix exponential of a symmetric matrix via eigendecomposition."""
    a = as_node(a)
    sym = 0.5 * (a.value + np.swapaxes(a.value, -1, -2))
    w, v = np.linalg.eigh(sym)
    ew = np.exp(w)
    out = (v * ew[..., None, :]) @ np.swapaxes(v, -1, -2)

    diff = w[..., :, None] - w[..., None, :]
    near = np.abs(diff) < 1e-12
    ediff = ew[..., :, None] - ew[..., None, :]
    f = np.where(near, np.exp(0.5 * (w[..., :, None] + w[..., None, :])),
                 ediff / np.where(near, 1.0, diff))

    def vjp(g):
        inner = np.swapaxes(v, -1, -2) @ g @ v
        z = v @ (f * inner) @ np.swapaxes(v, -1, -2)
        return 0.5 * (z + np.swapaxes(z, -1, -2))

    return Node(out, ((a, vjp),), "sym_expm")


def sym_from_tril(flat, d):
    """Pack (..., d(d+1)/2) entries into symmetric matrices (..., d, d)."""
    flat = as_node(flat)
    rows, cols = np.tril_indices(d)
    batch = flat.value.shape[:-1]
    out = np.zeros(batch + (d, d))
    out[..., rows, cols] = flat.value
    out = out + np.swapaxes(out, -1, -2)
    idx = np.arange(d)
    out[..., idx, idx] *= 0.5

    def vjp(g):
        g = g + np.swapaxes(g, -1, -2)
        g = g.copy()
        g[..., idx, idx] *= 0.5
        return g[..., rows, cols]

    return Node(out, ((flat, vjp),), "sym_from_tril")


def tril_from_flat(flat, d, exp_diag=True):
    """Build lower-triangular factors from flat entries, diag through exp."""
    flat = as_node(flat)
    rows, cols = np.tril_indices(d)
    diag_mask = rows == cols
    vals = flat.value.copy()
    if exp_diag:
        vals[..., diag_mask] = np.exp(vals[..., diag_mask])
    batch = flat.value.shape[:-1]
    out = np.zeros(batch + (d, d))
    out[..., rows, cols] = vals

    def vjp(g):
        gflat = g[..., rows, cols]
        if exp_diag:
            gflat = gflat.copy()
            gflat[..., diag_mask] *= vals[..., diag_mask]
        return gflat

    return Node(out, ((flat, vjp),), "tril_from_flat")


# ----------------------------------------------------------------- backward

def grad(loss: Node, wrt: Sequence[Node], check_finite: bool = True) -> List[np.ndarray]:
    """Adjoints of a scalar loss with respect to the given nodes.

    Each reachable node is visited exactly once, in decreasing creation
    order (a valid reverse topological order for eagerly built graphs).
    Nodes not on any path to the loss get zero gradients; non-finite
    adjoints raise, naming the op that produced them.
    """
    if loss.value.size != 1:
        raise ValidationError("loss must be scalar-valued")
    wrt_ids = {id(n) for n in wrt}
    adjoint: Dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.value)}
    pending: Dict[int, Node] = {loss.uid: loss}
    heap = [-loss.uid]
    results: Dict[int, np.ndarray] = {}
    while heap:
        uid = -heapq.heappop(heap)
        node = pending.pop(uid)
        g = adjoint.pop(uid)
        if id(node) in wrt_ids:
            prev = results.get(id(node))
            results[id(node)] = g if prev is None else prev + g
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if check_finite and not math.isfinite(float(np.sum(contrib))):
                if not np.all(np.isfinite(contrib)):
                    raise NumericalError(
                        f"non-finite adjoint produced by op '{node.tag}'")
            prev = adjoint.get(parent.uid)
            if prev is None:
                adjoint[parent.uid] = contrib
                pending[parent.uid] = parent
                heapq.heappush(heap, -parent.uid)
            else:
                adjoint[parent.uid] = prev + contrib
    return [np.asarray(results.get(id(n), np.zeros_like(n.value))) for n in wrt]


# ----------------------------------------------------------------- parameters

@dataclass(frozen=True)
class ParamVector:
    """Flat parameter vector with a named-slice layout."""

    values: np.ndarray
    layout: dict

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).ravel()
        object.__setattr__(self, "values", vals)
        covered = np.zeros(vals.size, dtype=bool)
        for name, (start, stop, shape) in self.layout.items():
            if stop - start != int(np.prod(shape)):
                raise ValidationError(f"slice '{name}' does not match its shape")
            if covered[start:stop].any():
                raise ValidationError(f"slice '{name}' overlaps another slice")
            covered[start:stop] = True
        if not covered.all():
            raise ValidationError("layout does not cover the full vector")

    @classmethod
    def build(cls, spec: dict, init=None) -> "ParamVector":
        """spec maps names to shapes; init maps names to arrays (default 0)."""
        layout = {}
        chunks = []
        offset = 0
        for name, shape in spec.items():
            shape = tuple(int(s) for s in np.atleast_1d(shape))
            size = int(np.prod(shape)) if shape else 1
            layout[name] = (offset, offset + size, shape)
            if init is not None and name in init:
                arr = np.asarray(init[name], dtype=float).reshape(shape)
            else:
                arr = np.zeros(shape)
            chunks.append(arr.ravel())
            offset += size
        return cls(np.concatenate(chunks) if chunks else np.zeros(0), layout)

    def view(self, name: str) -> np.ndarray:
        start, stop, shape = self.layout[name]
        return self.values[start:stop].reshape(shape)

    def bind(self) -> dict:
        """Fresh leaf nodes for every named slice."""
        return {name: Node(self.view(name).copy(), tag=name) for name in self.layout}

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=float).copy(), self.layout)

    def updated(self, name: str, value) -> "ParamVector":
        vals = self.values.copy()
        start, stop, shape = self.layout[name]
        vals[start:stop] = np.asarray(value, dtype=float).ravel()
        return ParamVector(vals, self.layout)

    @property
    def size(self) -> int:
        return self.values.size


def flat_grad(loss: Node, params: ParamVector, bound: dict,
              check_finite: bool = True) -> np.ndarray:
    """Gradient of the loss as a flat vector in the params layout."""
    names = list(bound.keys())
    gs = grad(loss, [bound[n] for n in names], check_finite=check_finite)
    out = np.zeros(params.size)
    for name, g in zip(names, gs):
        start, stop, _ = params.layout[name]
        out[start:stop] = g.ravel()
    return out


# ----------------------------------------------------------------- optimizer

@dataclass(frozen=True)
class OptimizerState:
    """Adaptive-moment (Adam) state."""

    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, size: int, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "OptimizerState":
        return cls(0, np.zeros(size), np.zeros(size), lr, beta1, beta2, eps)

    def with_lr(self, lr: float) -> "OptimizerState":
        return replace(self, lr=lr)


def adam_step(state: OptimizerState, params: ParamVector,
              gradient: np.ndarray) -> Tuple[OptimizerState, ParamVector]:
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != params.values.shape:
        raise ValidationError("gradient shape does not match parameters")
    step = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * gradient
    v = state.beta2 * state.v + (1 - state.beta2) * gradient * gradient
    mhat = m / (1 - state.beta1 ** step)
    vhat = v / (1 - state.beta2 ** step)
    new_values = params.values - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return replace(state, step=step, m=m, v=v), params.with_values(new_values)


# ----------------------------------------------------------------- checking

def grad_check(build: Callable[[ParamVector], Tuple[Node, dict]],
               params: ParamVector, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``build(params)`` must return ``(loss_node, bound_leaves)`` and be a
    deterministic function of the parameter values.
    """
    loss, bound = build(params)
    analytic = flat_grad(loss, params, bound)
    worst = 0.0
    base = params.values
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + h
        hi, _ = build(params.with_values(bumped))
        bumped[i] = base[i] - h
        lo, _ = build(params.with_values(bumped))
        fd = (float(hi.value) - float(lo.value)) / (2 * h)
        err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst


def supported_ops() -> Tuple[str, ...]:
    return ("add", "sub", "mul", "div", "neg", "matmul", "sum", "mean",
            "getitem", "reshape", "swapaxes", "concat", "stack", "where",
            "tanh", "exp", "log", "sin", "cos", "softplus", "sigmoid",
            "logsumexp", "logaddexp", "cholesky", "solve_psd", "logdet_psd",
            "sym_expm", "sym_from_tril", "tril_from_flat")
