"""Stochastic transition models and ensembles.

Kinds: single integrator (commands are velocities), double integrator
(commands are forces on a point mass), point mass with a residual MLP force
field, and point mass with a one-sided spring-damper contact plane plus the
residual field.  All steps are explicit Euler at the trajectory dt and are
differentiable in state, command, and model parameters through the tape.

Process noise enters by reparametrization (std times caller-supplied
standard normal draws), so a zero std gives bit-exact deterministic steps.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import NumericalError, ValidationError

SINGLE_INTEGRATOR = "single_integrator"
DOUBLE_INTEGRATOR = "double_integrator"
POINT_MASS_RESIDUAL = "point_mass_residual"
SPRING_DAMPER_CONTACT = "spring_damper_contact"

KINDS = (SINGLE_INTEGRATOR, DOUBLE_INTEGRATOR, POINT_MASS_RESIDUAL,
         SPRING_DAMPER_CONTACT)

RESIDUAL_WIDTHS = (20, 20)


@dataclass(frozen=True)
class PerturbationRegime:
    """Evaluation-time stochasticity: force noise and initial-position noise."""

    force_std: float = 0.0
    init_pos_std: float = 0.0
    regime_id: str = "deterministic"

    def __post_init__(self):
        if self.force_std < 0 or self.init_pos_std < 0:
            raise ValidationError("noise standard deviations must be nonnegative")


@dataclass(frozen=True)
class DynamicsModel:
    """Transition model; parameters live in a flat ParamVector."""

    kind: str
    params: ad.ParamVector
    dt: float
    state_dim: int
    command_dim: int
    widths: tuple = RESIDUAL_WIDTHS
    init_pos_noise_std: float = 0.0
    contact_axis: int = -1
    contact_height: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown dynamics kind '{self.kind}'")
        if self.dt <= 0:
            raise ValidationError("dt must be positive")

    @property
    def pos_dim(self) -> int:
        if self.kind == SINGLE_INTEGRATOR:
            return self.state_dim
        return self.state_dim // 2

    @property
    def mass(self) -> float:
        return float(np.exp(self.params.view("log_mass")[0]))

    def feature_vector(self) -> np.ndarray:
        """Compact summary of the parameters, fed to conditioned classifiers."""
        v = self.params.values
        return np.array([v.mean(), v.std(), np.abs(v).max()])


def _param_spec(kind, state_dim, command_dim, widths):
    spec = {"noise_std": (command_dim,)}
    if kind == SINGLE_INTEGRATOR:
        return spec
    spec["log_mass"] = (1,)
    if kind == DOUBLE_INTEGRATOR:
        return spec
    d_in, (h1, h2) = state_dim, widths
    spec.update({
        "res_w1": (h1, d_in), "res_b1": (h1,),
        "res_w2": (h2, h1), "res_b2": (h2,),
        "res_w3": (command_dim, h2), "res_b3": (command_dim,),
    })
    if kind == SPRING_DAMPER_CONTACT:
        spec.update({"stiffness": (1,), "damping": (1,)})
    return spec


def make_model(kind: str, dt: float, state_dim: int, command_dim: int,
               mass: float = 1.0, noise_std=0.0, widths=RESIDUAL_WIDTHS,
               stiffness: float = 1e4, damping: float = 1e2,
               contact_height: float = 0.0, residual_init=None) -> DynamicsModel:
    if kind != SINGLE_INTEGRATOR and mass <= 0:
        raise ValidationError("mass must be positive")
    spec = _param_spec(kind, state_dim, command_dim, widths)
    init = {"noise_std": np.broadcast_to(np.asarray(noise_std, dtype=float),
                                         (command_dim,))}
    if "log_mass" in spec:
        init["log_mass"] = np.array([np.log(mass)])
    if "stiffness" in spec:
        init["stiffness"] = np.array([stiffness])
        init["damping"] = np.array([damping])
    if residual_init:
        init.update(residual_init)
    params = ad.ParamVector.build(spec, init)
    return DynamicsModel(kind, params, dt, state_dim, command_dim,
                         widths=tuple(widths), contact_height=contact_height)


def apply_regime(m: DynamicsModel, r: PerturbationRegime) -> DynamicsModel:
    """Copy of the model with the regime's force and init-position noise."""
    params = m.params.updated(
        "noise_std", np.full(m.command_dim, r.force_std))
    return replace(m, params=params, init_pos_noise_std=r.init_pos_std)


# ----------------------------------------------------------------- stepping

def _residual_node(bound, xi):
    h = ad.tanh(ad.matmul(xi, ad.transpose_last(bound["res_w1"])) + bound["res_b1"])
    h = ad.tanh(ad.matmul(h, ad.transpose_last(bound["res_w2"])) + bound["res_b2"])
    return ad.matmul(h, ad.transpose_last(bound["res_w3"])) + bound["res_b3"]


def step_context(m: DynamicsModel, bound: dict) -> dict:
    """Per-rollout invariants hoisted out of the step loop."""
    ctx = {"noise_std": bound["noise_std"]}
    if m.kind == SINGLE_INTEGRATOR:
        return ctx
    d = m.pos_dim
    # state' = state @ shift^T + accel-extension; shift adds dt * vel to pos
    shift = np.eye(2 * d)
    shift[:d, d:] = m.dt * np.eye(d)
    ctx["shift_t"] = ad.constant(shift.T)
    # maps accel (.., d) onto the velocity block of the state
    accel_embed = np.zeros((d, 2 * d))
    accel_embed[:, d:] = m.dt * np.eye(d)
    ctx["accel_embed"] = ad.constant(accel_embed)
    ctx["inv_mass"] = ad.div(1.0, ad.exp(bound["log_mass"][0]))
    return ctx


def step_node(m: DynamicsModel, bound: dict, state: ad.Node, command: ad.Node,
              noise: np.ndarray, ctx: Optional[dict] = None) -> ad.Node:
    """One Euler step; position integrates the pre-update velocity."""
    if ctx is None:
        ctx = step_context(m, bound)
    noise = np.asarray(noise, dtype=float)
    noisy_cmd = command + ad.mul(ctx["noise_std"], ad.constant(noise))
    if m.kind == SINGLE_INTEGRATOR:
        return state + ad.mul(noisy_cmd, m.dt)

    d = m.pos_dim
    force = noisy_cmd
    if m.kind in (POINT_MASS_RESIDUAL, SPRING_DAMPER_CONTACT):
        force = force + _residual_node(bound, state)
    if m.kind == SPRING_DAMPER_CONTACT:
        axis = m.contact_axis % d
        pos_c = state[..., axis]
        vel_c = state[..., d + axis]
        below = pos_c.value < m.contact_height
        penetration = ad.constant(np.full(pos_c.shape, m.contact_height)) - pos_c
        push = ad.mul(bound["stiffness"][0], penetration) - ad.mul(bound["damping"][0], vel_c)
        contact = ad.where(below, push, ad.constant(np.zeros(pos_c.shape)))
        onehot = np.zeros(d)
        onehot[axis] = 1.0
        force = force + ad.mul(ad.reshape(contact, contact.shape + (1,)), ad.constant(onehot))
    accel = ad.mul(force, ctx["inv_mass"])
    return ad.matmul(state, ctx["shift_t"]) + ad.matmul(accel, ctx["accel_embed"])


def step(m: DynamicsModel, state, command, noise) -> np.ndarray:
    """Numeric step; raises on a non-finite result."""
    out = step_node(m, m.params.bind(), ad.constant(np.asarray(state, dtype=float)),
                    ad.constant(np.asarray(command, dtype=float)), noise).value
    if not np.all(np.isfinite(out)):
        raise NumericalError("dynamics step produced a non-finite state")
    return out


# ----------------------------------------------------------------- ensembles

@dataclass(frozen=True)
class DynamicsEnsemble:
    members: tuple

    def __post_init__(self):
        if len(self.members) == 0:
            raise ValidationError("ensemble needs at least one member")
        first = self.members[0]
        for m in self.members:
            if (m.kind, m.dt, m.state_dim, m.command_dim) != (
                    first.kind, first.dt, first.state_dim, first.command_dim):
                raise ValidationError("ensemble members must share kind, dt and dims")

    @property
    def size(self) -> int:
        return len(self.members)

    def replace_member(self, j: int, member: DynamicsModel) -> "DynamicsEnsemble":
        members = list(self.members)
        members[j] = member
        return DynamicsEnsemble(tuple(members))


def _mlp_forward(ws, xi):
    h = np.tanh(xi @ ws["res_w1"].T + ws["res_b1"])
    h = np.tanh(h @ ws["res_w2"].T + ws["res_b2"])
    return h @ ws["res_w3"].T + ws["res_b3"]


def init_residual_ensemble(l_members: int, dt: float, state_dim: int,
                           command_dim: int, probe_states: np.ndarray,
                           rng: np.random.Generator, mass: float = 1.0,
                           target_std: float = 5.0, widths=RESIDUAL_WIDTHS,
                           kind: str = POINT_MASS_RESIDUAL,
                           noise_std=0.0) -> DynamicsEnsemble:
    """Residual-MLP members whose force fields have the requested spread.

    The output layer of each member is rescaled so the empirical std of its
    residual forces over the probe states matches ``target_std``.
    """
    if l_members < 1:
        raise ValidationError("need at least one member")
    probes = np.atleast_2d(np.asarray(probe_states, dtype=float))
    members = []
    h1, h2 = widths
    for _ in range(l_members):
        ws = {
            "res_w1": rng.standard_normal((h1, state_dim)) / np.sqrt(state_dim),
            "res_b1": rng.standard_normal(h1) * 0.3,
            "res_w2": rng.standard_normal((h2, h1)) / np.sqrt(h1),
            "res_b2": rng.standard_normal(h2) * 0.3,
            "res_w3": rng.standard_normal((command_dim, h2)) / np.sqrt(h2),
            "res_b3": np.zeros(command_dim),
        }
        raw_std = _mlp_forward(ws, probes).std()
        scale = 0.0 if target_std == 0.0 else target_std / max(raw_std, 1e-12)
        ws["res_w3"] = ws["res_w3"] * scale
        members.append(make_model(kind, dt, state_dim, command_dim, mass=mass,
                                  noise_std=noise_std, widths=widths,
                                  residual_init=ws))
    return DynamicsEnsemble(tuple(members))


@dataclass(frozen=True)
class InitStateDist:
    """Distribution of the first state; optionally trainable."""

    mean: np.ndarray
    cov: np.ndarray
    trainable: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValidationError("init covariance must match the state dim")
        object.__setattr__(self, "_chol", np.linalg.cholesky(
            self.cov + 1e-12 * np.eye(self.mean.size)))

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, noise: np.ndarray) -> np.ndarray:
        return self.mean + np.asarray(noise, dtype=float) @ self._chol.T
