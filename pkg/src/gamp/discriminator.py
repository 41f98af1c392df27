"""Approximate trajectory densities and the discriminators built from them.

Three families:

* ``factorized``: one Gaussian per timestep over the stacked (state, command);
* ``taskspace``: the factorized base times per-task-space Gaussians over the
  lifted (state, command) values;
* ``gmm``: a Gaussian mixture over pooled per-timestep points in each
  configured task space (time-independent).

A fitted model can be evaluated numerically or through the tape; densities
are deliberately unnormalized over trajectory space (dependencies across
time are dropped), which is exactly what makes them useful as the ratio
discriminator ``q_data / (q_data + q_samples)`` rather than as generators.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import taskspace as ts
from .errors import ValidationError
from .gaussians import (COV_FLOOR, Gaussian, GaussianMixture, compensated_sum,
                        em_fit_gmm, floor_spd, gmm_em_step, gmm_logpdf)
from .rollout import Trajectory

LOG_2PI = math.log(2.0 * math.pi)

FACTORIZED = "factorized"
TASKSPACE = "taskspace"
GMM = "gmm"


def _precisions(covs: np.ndarray):
    eye = np.eye(covs.shape[-1])
    precs = np.linalg.solve(covs, np.broadcast_to(eye, covs.shape))
    signs, logdets = np.linalg.slogdet(covs)
    if np.any(signs <= 0):
        raise ValidationError("non-PD covariance in a time profile")
    return precs, logdets


@dataclass(frozen=True, eq=False)
class TimeProfile:
    """Per-timestep Gaussian moments with cached precisions."""

    means: np.ndarray   # (T, d)
    covs: np.ndarray    # (T, d, d)

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        covs = floor_spd(np.asarray(self.covs, dtype=float))
        precs, logdets = _precisions(covs)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "precisions", precs)
        object.__setattr__(self, "logdets", logdets)

    @property
    def horizon(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def second_moments(self) -> np.ndarray:
        return self.covs + np.einsum("ti,tj->tij", self.means, self.means)


@dataclass(frozen=True, eq=False)
class QModel:
    family: str
    strategy: ts.ControlStrategy
    task_maps: tuple
    base: Optional[TimeProfile]
    spaces: tuple  # TimeProfile per map (taskspace) or GaussianMixture per map (gmm)

    @property
    def horizon(self) -> Optional[int]:
        return self.base.horizon if self.base is not None else None


def _lift_points(task_map: ts.TaskMap, strategy: ts.ControlStrategy,
                 states: np.ndarray, commands: np.ndarray) -> np.ndarray:
    x = ts.lift_state(task_map, strategy, states)
    pos_dim = task_map.input_dim
    u = ts.lift_command(task_map, strategy, states[..., :pos_dim], commands)
    return np.concatenate([x, u], axis=-1)


def _resolve(task_map: ts.TaskMap, context) -> ts.TaskMap:
    if task_map.kind != "context":
        return task_map
    if context is None:
        raise ValidationError("trajectory carries no frames for a context map")
    a, b = context[task_map.context_slot]
    return ts.TaskMap.frame(a, b)


def resolve_maps(task_maps, traj_or_context):
    context = traj_or_context.context if isinstance(traj_or_context, Trajectory) \
        else traj_or_context
    return tuple(_resolve(m, context) for m in task_maps)


def resolve_maps_batch(task_maps, trajs: Sequence[Trajectory]):
    """Stack per-trajectory frames into batched affine maps."""
    out = []
    for m in task_maps:
        if m.kind != "context":
            out.append(m)
            continue
        mats = np.stack([t.context[m.context_slot][0] for t in trajs])
        offs = np.stack([t.context[m.context_slot][1] for t in trajs])
        out.append(ts.TaskMap.frame(mats, offs))
    return tuple(out)


# ------------------------------------------------------------------ fitting

def _per_t_profile(points: np.ndarray, floor: float) -> TimeProfile:
    """points: (N, T, d) -> per-timestep MLE moments."""
    n = points.shape[0]
    if n < 2:
        raise ValidationError("per-timestep fits need at least two trajectories")
    means = points.mean(axis=0)
    diff = points - means
    covs = np.einsum("nti,ntj->tij", diff, diff) / n
    return TimeProfile(means, floor_spd(covs, floor))


def _stacked(trajs: Sequence[Trajectory], task_map, strategy):
    pts = []
    for traj in trajs:
        resolved = _resolve(task_map, traj.context) if task_map is not None else None
        if resolved is None:
            z = np.concatenate([traj.states, traj.commands], axis=-1)
        else:
            z = _lift_points(resolved, strategy, traj.states, traj.commands)
        pts.append(z)
    return np.stack(pts)  # (N, T, d)


def fit_q(trajs: Sequence[Trajectory], family: str = FACTORIZED,
          task_maps=(), strategy: Optional[ts.ControlStrategy] = None,
          k: int = 20, em_steps: int = 10,
          rng: Optional[np.random.Generator] = None,
          floor: float = COV_FLOOR) -> QModel:
    """Maximum-likelihood fit of the chosen density family on trajectories."""
    if not trajs:
        raise ValidationError("cannot fit a density on zero trajectories")
    strategy = strategy or ts.ControlStrategy(ts.VELOCITY)
    task_maps = tuple(task_maps)
    if family in (FACTORIZED, TASKSPACE):
        horizons = {t.horizon for t in trajs}
        if len(horizons) != 1:
            raise ValidationError("time-indexed families need aligned trajectories")
        base = _per_t_profile(_stacked(trajs, None, strategy), floor)
        spaces = ()
        if family == TASKSPACE:
            spaces = tuple(_per_t_profile(_stacked(trajs, m, strategy), floor)
                           for m in task_maps)
        return QModel(family, strategy, task_maps, base, spaces)
    if family == GMM:
        if not task_maps:
            task_maps = (ts.TaskMap.identity(trajs[0].state_dim),)
        rng = rng if rng is not None else np.random.default_rng(0)
        spaces = []
        for m in task_maps:
            pooled = np.concatenate([
                _stacked([traj], m if m.kind != "identity" else None, strategy)[0]
                for traj in trajs])
            spaces.append(em_fit_gmm(pooled, k, steps=em_steps, rng=rng, floor=floor))
        return QModel(GMM, strategy, task_maps, None, tuple(spaces))
    raise ValidationError(f"unknown density family '{family}'")


# ------------------------------------------------------------------ numeric eval

def _profile_loglik(profile: TimeProfile, z: np.ndarray, offsets=None) -> float:
    t_idx = np.arange(z.shape[0]) if offsets is None else offsets
    diff = z - profile.means[t_idx]
    quad = np.einsum("ti,tij,tj->t", diff, profile.precisions[t_idx], diff)
    per_t = -0.5 * (quad + profile.logdets[t_idx] + profile.dim * LOG_2PI)
    return compensated_sum(per_t)


def q_loglik(q: QModel, traj: Trajectory, offset: int = 0) -> float:
    """Log-density of one trajectory under the fitted model.

    ``offset`` anchors a shorter-than-model trajectory (a chunk) at a time
    index for the time-indexed families.
    """
    if q.family in (FACTORIZED, TASKSPACE):
        if traj.horizon + offset > q.horizon:
            raise ValidationError("trajectory does not fit inside the model horizon")
        t_idx = offset + np.arange(traj.horizon)
        z = np.concatenate([traj.states, traj.commands], axis=-1)
        total = _profile_loglik(q.base, z, t_idx)
        for m, profile in zip(q.task_maps, q.spaces):
            zp = _lift_points(_resolve(m, traj.context), q.strategy,
                              traj.states, traj.commands)
            total += _profile_loglik(profile, zp, t_idx)
        return total
    total = 0.0
    for m, mixture in zip(q.task_maps, q.spaces):
        if m.kind == "identity":
            z = np.concatenate([traj.states, traj.commands], axis=-1)
        else:
            z = _lift_points(_resolve(m, traj.context), q.strategy,
                             traj.states, traj.commands)
        total += compensated_sum(gmm_logpdf(mixture, z))
    return total


# ------------------------------------------------------------------ graph eval

def _affine_lift_node(task_map: ts.TaskMap, strategy, states, commands):
    """Lifted (x, u) of (T, M, .) nodes for identity/affine maps."""
    x = ts.lift_state_node(task_map, strategy, states)
    if task_map.kind == "identity":
        u = commands
    else:
        a = ad.constant(task_map.a)
        u = ad.reshape(ad.matmul(a, ad.reshape(commands, commands.shape + (1,))),
                       commands.shape[:-1] + (task_map.output_dim,))
    return ad.concat([x, u], axis=-1)


def _profile_loglik_node(profile: TimeProfile, z: ad.Node, offsets=None) -> ad.Node:
    horizon = z.shape[0]
    if offsets is None:
        idx = np.arange(horizon)
        means = profile.means[idx][:, None, :]
        precs = profile.precisions[idx][:, None, :, :]
        logdets = profile.logdets[idx][:, None]
    else:
        idx = np.asarray(offsets)[None, :] + np.arange(horizon)[:, None]  # (T, M)
        means = profile.means[idx]
        precs = profile.precisions[idx]
        logdets = profile.logdets[idx]
    diff = z - ad.constant(means)
    sol = ad.matmul(ad.constant(precs), ad.reshape(diff, diff.shape + (1,)))
    quad = ad.sum_(ad.mul(diff, ad.reshape(sol, diff.shape)), axis=-1)  # (T, M)
    per_t = ad.mul(quad + ad.constant(logdets + profile.dim * LOG_2PI), -0.5)
    return ad.sum_(per_t, axis=0)  # (M,)


def _gmm_loglik_node(mixture: GaussianMixture, z: ad.Node) -> ad.Node:
    comp_terms = []
    for w, comp in zip(mixture.weights, mixture.components):
        diff = z - ad.constant(comp.mean)
        sol = ad.matmul(ad.constant(comp.precision), ad.reshape(diff, diff.shape + (1,)))
        quad = ad.sum_(ad.mul(diff, ad.reshape(sol, diff.shape)), axis=-1)
        const = math.log(w) - 0.5 * (comp.logdet + comp.dim * LOG_2PI)
        comp_terms.append(ad.mul(quad, -0.5) + ad.constant(np.float64(const)))
    stackk = ad.stack(comp_terms, axis=0)  # (K, T, M)
    per_t = ad.logsumexp(stackk, axis=0)
    return ad.sum_(per_t, axis=0)


def q_loglik_node(q: QModel, states: ad.Node, commands: ad.Node,
                  maps=None, offsets=None) -> ad.Node:
    """(M,) log-density of batched rollouts; differentiable in the rollout.

    Model parameters are constants here: gradients flow only through the
    trajectory, matching their role as a fixed discriminator per update.
    """
    maps = tuple(maps) if maps is not None else q.task_maps
    if q.family in (FACTORIZED, TASKSPACE):
        z = ad.concat([states, commands], axis=-1)
        total = _profile_loglik_node(q.base, z, offsets)
        for m, profile in zip(maps, q.spaces):
            zp = _affine_lift_node(m, q.strategy, states, commands)
            total = total + _profile_loglik_node(profile, zp, offsets)
        return total
    total = None
    for m, mixture in zip(maps, q.spaces):
        if m.kind == "identity":
            z = ad.concat([states, commands], axis=-1)
        else:
            z = _affine_lift_node(m, q.strategy, states, commands)
        term = _gmm_loglik_node(mixture, z)
        total = term if total is None else total + term
    return total


# ------------------------------------------------------------------ updates

def stochastic_mle_update(q: QModel, batch: Sequence[Trajectory], step: float,
                          em_steps: int = 1, em_points: Optional[int] = None,
                          rng: Optional[np.random.Generator] = None,
                          floor: float = COV_FLOOR) -> QModel:
    """Move the model toward the batch MLE.

    Time-indexed families blend sufficient statistics (mean and second
    moment) with rate ``step``; the mixture family takes warm-started EM
    steps on the batch (subsampled to ``em_points`` if given).
    """
    if not batch:
        raise ValidationError("empty batch")
    if not (0.0 <= step <= 1.0):
        raise ValidationError("step must lie in [0, 1]")
    if step == 0.0:
        return q
    if q.family in (FACTORIZED, TASKSPACE):
        target = fit_q(batch, q.family, q.task_maps, q.strategy, floor=floor)

        def blend(old: TimeProfile, new: TimeProfile) -> TimeProfile:
            if step == 1.0:
                return new
            mean = (1 - step) * old.means + step * new.means
            second = (1 - step) * old.second_moments() + step * new.second_moments()
            covs = second - np.einsum("ti,tj->tij", mean, mean)
            return TimeProfile(mean, floor_spd(covs, floor))

        return replace(q, base=blend(q.base, target.base),
                       spaces=tuple(blend(o, n) for o, n in zip(q.spaces, target.spaces)))

    rng = rng if rng is not None else np.random.default_rng(0)
    spaces = []
    for m, mixture in zip(q.task_maps, q.spaces):
        pooled = np.concatenate([
            _stacked([traj], m if m.kind != "identity" else None, q.strategy)[0]
            for traj in batch])
        if em_points is not None and pooled.shape[0] > em_points:
            pick = rng.choice(pooled.shape[0], size=em_points, replace=False)
            pooled = pooled[pick]
        for _ in range(em_steps):
            mixture = gmm_em_step(pooled, mixture, floor)
        spaces.append(mixture)
    return replace(q, spaces=tuple(spaces))


def dq_logit(q_data: QModel, q_samples: QModel, traj: Trajectory,
             offset: int = 0) -> float:
    """log D_q(traj) = log q_data - log(q_data + q_samples); never under/overflows,
    and ties give exactly log(1/2)."""
    ld = q_loglik(q_data, traj, offset)
    ls = q_loglik(q_samples, traj, offset)
    diff = ls - ld
    if diff <= 0:
        return -np.log1p(np.exp(diff))
    return -diff - np.log1p(np.exp(-diff))


# ------------------------------------------------------------------ JSON

def _map_to_dict(m: ts.TaskMap) -> dict:
    doc = {"kind": m.kind, "input_dim": m.input_dim}
    if m.kind == "affine":
        doc["a"] = m.a.tolist()
        doc["b"] = m.b.tolist()
    elif m.kind == "planar_arm":
        doc["link_lengths"] = m.link_lengths.tolist()
    elif m.kind == "context":
        doc["context_slot"] = m.context_slot
    return doc


def _map_from_dict(doc: dict) -> ts.TaskMap:
    kind = doc["kind"]
    if kind == "identity":
        return ts.TaskMap.identity(doc["input_dim"])
    if kind == "affine":
        return ts.TaskMap.frame(np.asarray(doc["a"]), np.asarray(doc["b"]))
    if kind == "planar_arm":
        return ts.TaskMap.planar_arm(doc["link_lengths"])
    if kind == "context":
        return ts.TaskMap.from_context(doc["input_dim"], doc["context_slot"])
    raise ValidationError(f"unknown task map kind '{kind}'")


def q_to_dict(q: QModel) -> dict:
    doc = {
        "family": q.family,
        "strategy": {"kind": q.strategy.kind, "damping": q.strategy.damping},
        "task_maps": [_map_to_dict(m) for m in q.task_maps],
    }
    if q.family in (FACTORIZED, TASKSPACE):
        doc["base"] = {"means": q.base.means.tolist(), "covs": q.base.covs.tolist()}
        doc["spaces"] = [{"means": p.means.tolist(), "covs": p.covs.tolist()}
                         for p in q.spaces]
    else:
        doc["spaces"] = [
            {"weights": mix.weights.tolist(),
             "means": [c.mean.tolist() for c in mix.components],
             "covs": [c.cov.tolist() for c in mix.components]}
            for mix in q.spaces
        ]
    return doc


def q_from_dict(doc: dict) -> QModel:
    strategy = ts.ControlStrategy(doc["strategy"]["kind"], doc["strategy"]["damping"])
    maps = tuple(_map_from_dict(m) for m in doc["task_maps"])
    family = doc["family"]
    if family in (FACTORIZED, TASKSPACE):
        base = TimeProfile(np.asarray(doc["base"]["means"]),
                           np.asarray(doc["base"]["covs"]))
        spaces = tuple(TimeProfile(np.asarray(p["means"]), np.asarray(p["covs"]))
                       for p in doc["spaces"])
        return QModel(family, strategy, maps, base, spaces)
    spaces = tuple(
        GaussianMixture(np.asarray(p["weights"]),
                        tuple(Gaussian(np.asarray(m), np.asarray(c))
                              for m, c in zip(p["means"], p["covs"])))
        for p in doc["spaces"])
    return QModel(GMM, strategy, maps, None, spaces)


# ------------------------------------------------------------------ neural head

@dataclass(frozen=True)
class NeuralDiscriminator:
    """Per-timestep MLP classifier; trajectory score is the mean sigmoid."""

    params: ad.ParamVector
    feature_dim: int
    widths: tuple = (64, 64)


def make_neural_discriminator(feature_dim: int, widths=(64, 64),
                              rng: Optional[np.random.Generator] = None,
                              scale: float = 0.0) -> NeuralDiscriminator:
    """Zero weights by default: the untrained score is exactly 1/2."""
    h1, h2 = widths
    rng = rng if rng is not None else np.random.default_rng(0)
    spec = {"w1": (h1, feature_dim), "b1": (h1,), "w2": (h2, h1), "b2": (h2,),
            "w3": (1, h2), "b3": (1,)}
    init = None
    if scale > 0:
        init = {"w1": scale * rng.standard_normal((h1, feature_dim)),
                "w2": scale * rng.standard_normal((h2, h1)),
                "w3": scale * rng.standard_normal((1, h2))}
    return NeuralDiscriminator(ad.ParamVector.build(spec, init), feature_dim,
                               tuple(widths))


def d_features(states: np.ndarray, commands: np.ndarray, maps=(),
               strategy: Optional[ts.ControlStrategy] = None,
               theta_features: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-timestep feature rows: state, command, lifted values, model summary."""
    parts = [states, commands]
    strategy = strategy or ts.ControlStrategy(ts.VELOCITY)
    for m in maps:
        parts.append(_lift_points(m, strategy, states, commands))
    if theta_features is not None:
        tiled = np.broadcast_to(theta_features, states.shape[:-1] + (theta_features.size,))
        parts.append(tiled)
    return np.concatenate(parts, axis=-1)


def _d_logits_node(d: NeuralDiscriminator, bound: dict, feats: ad.Node) -> ad.Node:
    h = ad.tanh(ad.matmul(feats, ad.transpose_last(bound["w1"])) + bound["b1"])
    h = ad.tanh(ad.matmul(h, ad.transpose_last(bound["w2"])) + bound["b2"])
    out = ad.matmul(h, ad.transpose_last(bound["w3"])) + bound["b3"]
    return ad.reshape(out, out.shape[:-1])


def neural_d_score_node(d: NeuralDiscriminator, feats: ad.Node,
                        time_axis: int = 0) -> ad.Node:
    """Mean sigmoid logit over the time axis; parameters held constant."""
    bound = {name: ad.constant(d.params.view(name)) for name in d.params.layout}
    logits = _d_logits_node(d, bound, feats)
    return ad.mean(ad.sigmoid(logits), axis=time_axis)


def neural_d_score(d: NeuralDiscriminator, feats: np.ndarray) -> float:
    return float(neural_d_score_node(d, ad.constant(feats)).value)


def neural_d_train_step(d: NeuralDiscriminator, real_feats: np.ndarray,
                        fake_feats: np.ndarray, lr: float = 1e-3,
                        opt_state: Optional[ad.OptimizerState] = None):
    """One Adam step on binary cross-entropy (real 1, fake 0) per timestep."""
    bound = d.params.bind()
    real_logits = _d_logits_node(d, bound, ad.constant(real_feats))
    fake_logits = _d_logits_node(d, bound, ad.constant(fake_feats))
    loss = ad.mean(ad.softplus(ad.neg(real_logits))) + ad.mean(ad.softplus(fake_logits))
    g = ad.flat_grad(loss, d.params, bound)
    state = opt_state if opt_state is not None else ad.OptimizerState.fresh(
        d.params.size, lr)
    state, new_params = ad.adam_step(state, d.params, g)
    return replace(d, params=new_params), state, float(loss.value)
