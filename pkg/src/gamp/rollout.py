"""Differentiable forward sampling of the state-space generator.

A rollout alternates policy sampling and dynamics stepping, with every
random draw reparametrized from a caller-supplied stream, so a trajectory is
a deterministic function of (stream, policy params, dynamics params).  The
graph and numeric paths are the same code; numeric callers bind parameters
as constants and read values.

Chunked rollouts (short windows anchored at demonstration states, optionally
with start-state noise) support time-independent training.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import policy as pol
from .dynamics import (DynamicsEnsemble, DynamicsModel, InitStateDist,
                       step_context, step_node)
from .errors import NumericalError, ValidationError
from .rng import RngStream


@dataclass(frozen=True)
class Trajectory:
    """Time-indexed (state, command) pairs at a fixed dt."""

    dt: float
    states: np.ndarray
    commands: np.ndarray
    context: Optional[tuple] = None  # per-task-space (A, b) frames
    origin: str = "generated"

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        commands = np.atleast_2d(np.asarray(self.commands, dtype=float))
        if states.shape[0] != commands.shape[0]:
            raise ValidationError("states and commands must share the horizon")
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(commands))):
            raise ValidationError("trajectory contains non-finite entries")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "commands", commands)

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def command_dim(self) -> int:
        return self.commands.shape[1]


@dataclass(frozen=True)
class RolloutPlan:
    horizon: int
    samples: int
    chunk_len: Optional[int] = None
    init_noise_std: float = 0.0

    def __post_init__(self):
        if self.horizon < 1 or self.samples < 1:
            raise ValidationError("horizon and sample count must be positive")
        if self.chunk_len is not None and self.chunk_len > self.horizon:
            raise ValidationError("chunk length cannot exceed the horizon")


@dataclass(frozen=True)
class ObservationModel:
    """y_t given xi_t; identity by default, or a linear-Gaussian channel."""

    kind: str = "identity"
    matrix: Optional[np.ndarray] = None
    noise_cov: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("identity", "linear_gaussian"):
            raise ValidationError(f"unknown observation kind '{self.kind}'")
        if self.kind == "linear_gaussian":
            c = np.atleast_2d(np.asarray(self.matrix, dtype=float))
            cov = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
            if np.any(np.linalg.eigvalsh(0.5 * (cov + cov.T)) < -1e-12):
                raise ValidationError("observation noise covariance must be PSD")
            object.__setattr__(self, "matrix", c)
            object.__setattr__(self, "noise_cov", cov)
            object.__setattr__(self, "_chol", np.linalg.cholesky(
                cov + 1e-12 * np.eye(cov.shape[0])))


@dataclass
class RolloutGraph:
    """Stacked nodes of a batched rollout plus bookkeeping."""

    states: ad.Node      # (T, n, state_dim)
    commands: ad.Node    # (T, n, command_dim)
    final_state: ad.Node  # (n, state_dim)
    dt: float
    max_state_norm: float


def _draw_noises(model, policy, horizon, n, stream):
    gen = stream.generator()
    return {
        "init": gen.standard_normal((n, model.state_dim)),
        "init_pos": gen.standard_normal((n, model.pos_dim)),
        "policy": gen.standard_normal((horizon, n, policy.command_dim)),
        "process": gen.standard_normal((horizon, n, model.command_dim)),
        "obs": gen.standard_normal((horizon, n, model.state_dim)),
    }


def rollout_graph(model: DynamicsModel, policy: pol.PoGPolicy, pol_bound: dict,
                  dyn_bound: dict, init: InitStateDist, horizon: int, n: int,
                  stream: RngStream, start_states: Optional[np.ndarray] = None,
                  maps=None, t_grid: Optional[np.ndarray] = None,
                  obs: Optional[ObservationModel] = None) -> RolloutGraph:
    """Roll the generator forward for `horizon` steps with `n` parallel samples."""
    noises = _draw_noises(model, policy, horizon, n, stream)
    if t_grid is None:
        t_grid = np.linspace(0.0, 1.0, horizon) if horizon > 1 else np.zeros(1)
    pre = policy.precompute(pol_bound, np.asarray(t_grid, dtype=float))

    if start_states is not None:
        x0 = np.array(start_states, dtype=float)
        if x0.shape != (n, model.state_dim):
            raise ValidationError("start states must be (samples, state_dim)")
        state = ad.constant(x0)
    elif init.trainable and "init.mean" in pol_bound:
        spread = ad.mul(ad.exp(pol_bound["init.log_std"]), ad.constant(noises["init"]))
        state = pol_bound["init.mean"] + spread
    else:
        base = init.sample(noises["init"])
        if model.init_pos_noise_std > 0.0:
            base = base.copy()
            base[:, : model.pos_dim] += model.init_pos_noise_std * noises["init_pos"]
        state = ad.constant(base)

    state_nodes = []
    command_nodes = []
    max_norm = 0.0
    ctx = step_context(model, dyn_bound)
    for t in range(horizon):
        observed = state
        if obs is not None and obs.kind == "linear_gaussian":
            clean = ad.matmul(state, ad.constant(obs.matrix.T))
            observed = clean + ad.constant(noises["obs"][t][:, : obs.matrix.shape[0]]
                                           @ obs._chol.T)
        mean, _, chol = pol.pogp_eval_node(policy, pol_bound, pre, t, observed,
                                           maps=maps)
        eps = ad.constant(noises["policy"][t])
        if chol.value.ndim == 2:
            u = mean + ad.matmul(eps, ad.transpose_last(chol))
        else:
            u = mean + ad.reshape(ad.matmul(chol, ad.reshape(eps, eps.shape + (1,))),
                                  eps.shape)
        next_state = step_node(model, dyn_bound, state, u, noises["process"][t],
                               ctx=ctx)
        if not np.all(np.isfinite(next_state.value)):
            raise NumericalError(f"rollout produced a non-finite state at step {t}")
        max_norm = max(max_norm, float(np.abs(next_state.value).max()))
        state_nodes.append(state)
        command_nodes.append(u)
        state = next_state

    return RolloutGraph(ad.stack(state_nodes, axis=0),
                        ad.stack(command_nodes, axis=0),
                        state, model.dt, max_norm)


def graph_to_trajectories(graph: RolloutGraph, context=None,
                          origin: str = "generated") -> list:
    states = graph.states.value
    commands = graph.commands.value
    return [Trajectory(graph.dt, states[:, i], commands[:, i],
                       context=context, origin=origin)
            for i in range(states.shape[1])]


def rollout(model: DynamicsModel, policy: pol.PoGPolicy, params: ad.ParamVector,
            init: InitStateDist, plan: RolloutPlan, stream: RngStream,
            start_states=None, maps=None, origin: str = "generated",
            obs: Optional[ObservationModel] = None) -> list:
    """Numeric rollouts: parameters enter as constants."""
    pol_bound = {name: ad.constant(params.view(name)) for name in params.layout}
    dyn_bound = {name: ad.constant(model.params.view(name))
                 for name in model.params.layout}
    graph = rollout_graph(model, policy, pol_bound, dyn_bound, init,
                          plan.horizon, plan.samples, stream,
                          start_states=start_states, maps=maps, obs=obs)
    return graph_to_trajectories(graph, origin=origin)


def rollout_batch(ensemble: DynamicsEnsemble, policy: pol.PoGPolicy,
                  params: ad.ParamVector, init: InitStateDist,
                  plan: RolloutPlan, stream: RngStream) -> list:
    """Per-member rollouts with independent substreams: member j, sample i."""
    out = []
    for j, member in enumerate(ensemble.members):
        out.append(rollout(member, policy, params, init, plan,
                           stream.child("member", j)))
    return out


@dataclass(frozen=True)
class ChunkBatch:
    starts: np.ndarray      # (count, state_dim)
    demo_idx: np.ndarray    # (count,)
    offsets: np.ndarray     # (count,)
    refs: np.ndarray        # reference windows (count, chunk_len, state_dim)


def make_chunks(demos: Sequence[Trajectory], length: int, count: int,
                noise_std: float, rng: np.random.Generator) -> ChunkBatch:
    """Uniformly sampled demo windows with optional start-state noise."""
    min_len = min(d.horizon for d in demos)
    if length > min_len:
        raise ValidationError("chunk length exceeds the shortest demonstration")
    demo_idx = rng.integers(0, len(demos), size=count)
    offsets = rng.integers(0, min_len - length + 1, size=count)
    starts = np.stack([demos[d].states[o] for d, o in zip(demo_idx, offsets)])
    if noise_std > 0:
        starts = starts + noise_std * rng.standard_normal(starts.shape)
    refs = tuple(demos[d].states[o : o + length] for d, o in zip(demo_idx, offsets))
    return ChunkBatch(starts, demo_idx, offsets, np.stack(refs))
