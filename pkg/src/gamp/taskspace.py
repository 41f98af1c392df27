"""Task maps, their Jacobians, and state/command lifts per control strategy.

A task map sends the configuration (or full state) into a space where motion
is analyzed and controlled: identity, a rigid frame (possibly one frame per
sample in a batch), or a planar arm's forward kinematics.  Lifts follow the
control strategy: velocity commands map through the Jacobian, accelerations
drop the Jacobian-derivative term, forces map through a damped pseudo-inverse
of the transposed Jacobian.

Every operation has a numpy form and a graph form (suffix ``_node``) so the
same maps serve evaluation and differentiable rollouts.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import NumericalError, ValidationError

VELOCITY = "velocity"
ACCELERATION = "acceleration"
FORCE = "force"


@dataclass(frozen=True)
class ControlStrategy:
    kind: str = ACCELERATION
    damping: float = 1e-6  # pseudo-inverse regularization, force control only

    def __post_init__(self):
        if self.kind not in (VELOCITY, ACCELERATION, FORCE):
            raise ValidationError(f"unknown control strategy '{self.kind}'")
        if self.damping < 0:
            raise ValidationError("damping must be nonnegative")

    @property
    def has_velocity(self) -> bool:
        return self.kind in (ACCELERATION, FORCE)


@dataclass(frozen=True)
class TaskMap:
    """kind: 'identity' | 'affine' | 'planar_arm'.

    Affine maps hold a rotation ``a`` and translation ``b``; both may carry
    leading batch dimensions (one frame per sample).  ``context_slot`` marks
    a map whose frame is taken per trajectory from the dataset.
    """

    kind: str
    input_dim: int
    a: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    link_lengths: Optional[np.ndarray] = None
    context_slot: Optional[int] = None

    def __post_init__(self):
        if self.kind == "identity":
            object.__setattr__(self, "a", None)
        elif self.kind == "context":
            if self.context_slot is None:
                raise ValidationError("context maps need a frame slot index")
        elif self.kind == "affine":
            a = np.asarray(self.a, dtype=float)
            b = np.asarray(self.b, dtype=float)
            gram = a @ np.swapaxes(a, -1, -2)
            eye = np.eye(a.shape[-2])
            if np.abs(gram - eye).max() > 1e-8:
                raise ValidationError("affine frame rotation must be orthonormal")
            object.__setattr__(self, "a", a)
            object.__setattr__(self, "b", b)
        elif self.kind == "planar_arm":
            lengths = np.asarray(self.link_lengths, dtype=float)
            if np.any(lengths <= 0):
                raise ValidationError("link lengths must be positive")
            if lengths.size != self.input_dim:
                raise ValidationError("one link length per joint")
            object.__setattr__(self, "link_lengths", lengths)
        else:
            raise ValidationError(f"unknown task map kind '{self.kind}'")

    @property
    def output_dim(self) -> int:
        if self.kind in ("identity", "context"):
            return self.input_dim
        if self.kind == "affine":
            return self.a.shape[-2]
        return 2

    @classmethod
    def identity(cls, dim: int) -> "TaskMap":
        return cls("identity", dim)

    @classmethod
    def from_context(cls, dim: int, slot: int) -> "TaskMap":
        """A rigid frame taken per trajectory from the dataset."""
        return cls("context", dim, context_slot=slot)

    @classmethod
    def frame(cls, a, b) -> "TaskMap":
        a = np.asarray(a, dtype=float)
        return cls("affine", a.shape[-1], a=a, b=np.asarray(b, dtype=float))

    @classmethod
    def planar_arm(cls, link_lengths) -> "TaskMap":
        lengths = np.asarray(link_lengths, dtype=float)
        return cls("planar_arm", lengths.size, link_lengths=lengths)

    def with_frame(self, a, b) -> "TaskMap":
        return TaskMap.frame(a, b)


# ----------------------------------------------------------------- apply

def _check_resolved(m: TaskMap):
    if m.kind == "context":
        raise ValidationError("context map must be resolved against trajectory frames")


def task_apply(m: TaskMap, q: np.ndarray) -> np.ndarray:
    _check_resolved(m)
    q = np.asarray(q, dtype=float)
    if m.kind == "identity":
        return q
    if m.kind == "affine":
        return (m.a @ q[..., None])[..., 0] + m.b
    angles = np.cumsum(q, axis=-1)
    x = np.sum(m.link_lengths * np.cos(angles), axis=-1)
    y = np.sum(m.link_lengths * np.sin(angles), axis=-1)
    return np.stack([x, y], axis=-1)


def task_apply_node(m: TaskMap, q: ad.Node) -> ad.Node:
    if m.kind == "identity":
        return q
    if m.kind == "affine":
        out = ad.matmul(ad.constant(m.a), ad.reshape(q, q.shape + (1,)))
        return ad.reshape(out, out.shape[:-1]) + ad.constant(m.b)
    angles = _cumsum_node(q)
    lengths = ad.constant(m.link_lengths)
    x = ad.sum_(ad.mul(lengths, ad.cos(angles)), axis=-1)
    y = ad.sum_(ad.mul(lengths, ad.sin(angles)), axis=-1)
    return ad.stack([x, y], axis=-1)


def _cumsum_node(q: ad.Node) -> ad.Node:
    n = q.shape[-1]
    lower = np.tril(np.ones((n, n)))
    out = ad.matmul(ad.constant(lower), ad.reshape(q, q.shape + (1,)))
    return ad.reshape(out, q.shape)


# ----------------------------------------------------------------- jacobian

def task_jacobian(m: TaskMap, q: np.ndarray) -> np.ndarray:
    _check_resolved(m)
    q = np.asarray(q, dtype=float)
    if m.kind == "identity":
        return np.eye(m.input_dim)
    if m.kind == "affine":
        return m.a
    angles = np.cumsum(q, axis=-1)
    # column j sums contributions of links j..n
    sin_terms = m.link_lengths * np.sin(angles)
    cos_terms = m.link_lengths * np.cos(angles)
    n = m.input_dim
    jac = np.zeros(q.shape[:-1] + (2, n))
    for j in range(n):
        jac[..., 0, j] = -np.sum(sin_terms[..., j:], axis=-1)
        jac[..., 1, j] = np.sum(cos_terms[..., j:], axis=-1)
    return jac


def task_jacobian_node(m: TaskMap, q: ad.Node) -> ad.Node:
    if m.kind == "identity":
        return ad.constant(np.eye(m.input_dim))
    if m.kind == "affine":
        return ad.constant(m.a)
    angles = _cumsum_node(q)
    lengths = ad.constant(m.link_lengths)
    sin_terms = ad.mul(lengths, ad.sin(angles))
    cos_terms = ad.mul(lengths, ad.cos(angles))
    n = m.input_dim
    upper = np.triu(np.ones((n, n)))  # suffix sums: row j has links j..n
    sfx_sin = ad.matmul(sin_terms, ad.constant(upper.T))
    sfx_cos = ad.matmul(cos_terms, ad.constant(upper.T))
    return ad.stack([ad.neg(sfx_sin), sfx_cos], axis=-2)


# ----------------------------------------------------------------- lifts

def split_state(strategy: ControlStrategy, xi: np.ndarray):
    """Unpack the abstract state into (q, qdot-or-None)."""
    xi = np.asarray(xi, dtype=float)
    if not strategy.has_velocity:
        return xi, None
    d = xi.shape[-1]
    if d % 2 != 0:
        raise ValidationError("state with velocities must have even dimension")
    return xi[..., : d // 2], xi[..., d // 2 :]


def lift_state(m: TaskMap, strategy: ControlStrategy, xi: np.ndarray) -> np.ndarray:
    q, qdot = split_state(strategy, xi)
    x = task_apply(m, q)
    if qdot is None:
        return x
    xdot = (task_jacobian(m, q) @ qdot[..., None])[..., 0]
    return np.concatenate([x, xdot], axis=-1)


def lift_state_node(m: TaskMap, strategy: ControlStrategy, xi: ad.Node) -> ad.Node:
    d = xi.shape[-1]
    if not strategy.has_velocity:
        return task_apply_node(m, xi)
    q = xi[..., : d // 2]
    qdot = xi[..., d // 2 :]
    x = task_apply_node(m, q)
    jac = task_jacobian_node(m, q)
    xdot = ad.matmul(jac, ad.reshape(qdot, qdot.shape + (1,)))
    xdot = ad.reshape(xdot, xdot.shape[:-1])
    return ad.concat([x, xdot], axis=-1)


def command_matrix(m: TaskMap, strategy: ControlStrategy, q: np.ndarray) -> np.ndarray:
    """The linear map sending raw commands to their task-space value."""
    jac = task_jacobian(m, q)
    if strategy.kind != FORCE:
        return jac
    gram = jac @ np.swapaxes(jac, -1, -2) + strategy.damping * np.eye(jac.shape[-2])
    if strategy.damping == 0.0:
        rank = np.linalg.matrix_rank(jac)
        if rank < jac.shape[-2]:
            raise NumericalError("rank-deficient Jacobian with zero damping")
    return np.linalg.solve(gram, jac)


def command_matrix_node(m: TaskMap, strategy: ControlStrategy, q: ad.Node) -> ad.Node:
    jac = task_jacobian_node(m, q)
    if strategy.kind != FORCE:
        return jac
    if strategy.damping == 0.0:
        raise NumericalError("graph force lift requires positive damping")
    gram = ad.matmul(jac, ad.transpose_last(jac)) + ad.constant(
        strategy.damping * np.eye(jac.shape[-2]))
    return ad.solve_psd(gram, jac)


def lift_command(m: TaskMap, strategy: ControlStrategy, q: np.ndarray,
                 u: np.ndarray) -> np.ndarray:
    mat = command_matrix(m, strategy, q)
    return (mat @ np.asarray(u, dtype=float)[..., None])[..., 0]


def lift_command_node(m: TaskMap, strategy: ControlStrategy, q: ad.Node,
                      u: ad.Node) -> ad.Node:
    mat = command_matrix_node(m, strategy, q)
    out = ad.matmul(mat, ad.reshape(u, u.shape + (1,)))
    return ad.reshape(out, out.shape[:-1])
