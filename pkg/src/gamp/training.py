"""Adversarial policy training over a dynamics ensemble, dynamics
refinement against real-system executions, and imitation initialization.

The policy loss per sampled trajectory is

    -log q_data(tau) + log(q_data(tau) + q_samples_j(tau)) [- w_d log D(tau)]

averaged over members j and samples, with q_samples_j refreshed by a
(stochastic) maximum-likelihood update on each member's fresh batch before
the gradient step.  Density parameters are bound as constants, so gradients
reach the policy only through the sampled trajectories.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import discriminator as dsc
from . import metrics as met
from . import policy as pol
from . import rollout as ro
from .dynamics import DynamicsEnsemble, DynamicsModel, InitStateDist
from .errors import NumericalError, ValidationError
from .rng import RngStream

log = logging.getLogger("gamp.training")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 300
    m_samples: int = 20
    lr_policy: float = 1e-2
    lr_dynamics: float = 1e-3
    lr_neural_d: float = 1e-3
    q_family: str = dsc.FACTORIZED
    gmm_components: int = 20
    em_steps: int = 10
    em_points: Optional[int] = 1000
    ema_step: float = 0.3
    gmm_reinit_every: int = 50
    neural_d: bool = False
    neural_d_start_frac: float = 0.6
    neural_d_weight: float = 1.0
    neural_d_inner_steps: int = 2
    neural_d_theta_features: Optional[bool] = None  # default: on when L > 1
    q_shrink_to_data: float = 0.0  # regularize q_samples moments toward q_data
    seed: int = 0
    chunk_len: Optional[int] = None
    chunks_per_iter: int = 64
    chunk_noise_std: float = 0.0
    init_noise_std: float = 0.0
    divergence_scale: float = 1.0
    n_real: int = 10
    checkpoint_every: int = 0
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.iterations < 0 or self.m_samples < 1:
            raise ValidationError("iteration and sample counts must be positive")
        for name in ("lr_policy", "lr_dynamics", "lr_neural_d"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if not (0.0 <= self.ema_step <= 1.0):
            raise ValidationError("ema_step must lie in [0, 1]")


@dataclass
class TrainReport:
    loss_data_term: list = field(default_factory=list)
    loss_mix_term: list = field(default_factory=list)
    loss_neural_term: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    learning_rate: list = field(default_factory=list)
    diverged_iterations: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)

    def record(self, data_term, mix_term, neural_term, gnorm, lr, elapsed):
        self.loss_data_term.append(float(data_term))
        self.loss_mix_term.append(float(mix_term))
        self.loss_neural_term.append(float(neural_term))
        self.grad_norm.append(float(gnorm))
        self.learning_rate.append(float(lr))
        self.wall_clock.append(float(elapsed))

    @property
    def iterations(self) -> int:
        return len(self.loss_data_term)

    def loss_total(self) -> list:
        return [a + b + c for a, b, c in zip(
            self.loss_data_term, self.loss_mix_term, self.loss_neural_term)]

    def to_dict(self, include_wall_clock: bool = False) -> dict:
        out = {
            "loss_data_term": self.loss_data_term,
            "loss_mix_term": self.loss_mix_term,
            "loss_neural_term": self.loss_neural_term,
            "grad_norm": self.grad_norm,
            "learning_rate": self.learning_rate,
            "diverged_iterations": self.diverged_iterations,
        }
        if include_wall_clock:
            out["wall_clock"] = self.wall_clock
        return out


def _const_bound(params: ad.ParamVector) -> dict:
    return {name: ad.constant(params.view(name)) for name in params.layout}


def _q_maps_for(policy: pol.PoGPolicy, family: str):
    if family == dsc.FACTORIZED:
        return ()
    return policy.task_maps


# ------------------------------------------------------------------ imitation

def imitation_init(demos: Sequence[ro.Trajectory], policy: pol.PoGPolicy,
                   params: ad.ParamVector, steps: int = 200, lr: float = 1e-2,
                   batch_size: int = 512, stream: Optional[RngStream] = None,
                   fit_covariance: bool = True) -> ad.ParamVector:
    """Maximize the policy log-density on demonstrated (state, command) pairs.

    ``fit_covariance=False`` freezes the covariance parameters: pair
    regression shrinks them toward the conditional residuals, which starves
    the later adversarial phase of exploration noise.
    """
    if steps == 0:
        return params
    stream = stream or RngStream(0)
    cov_mask = np.ones(params.size)
    if not fit_covariance:
        for name, (start, stop, _) in params.layout.items():
            if name.endswith(("cov_logs", ".w_l", ".b_l")):
                cov_mask[start:stop] = 0.0
    horizon = min(d.horizon for d in demos)
    time_dependent = any(isinstance(h, pol.FeedbackHead) for h in policy.heads)
    opt = ad.OptimizerState.fresh(params.size, lr)
    gen = stream.child("imitation").generator()
    n_demos = len(demos)
    for step_idx in range(steps):
        demo_pick = gen.integers(0, n_demos, size=batch_size)
        t_pick = gen.integers(0, horizon, size=batch_size)
        states = np.stack([demos[d].states[t] for d, t in zip(demo_pick, t_pick)])
        commands = np.stack([demos[d].commands[t] for d, t in zip(demo_pick, t_pick)])
        bound = params.bind()
        if time_dependent:
            if len(policy.heads) != 1 or policy.task_maps[0].kind != "identity":
                raise ValidationError(
                    "imitation for time-dependent policies supports a single "
                    "identity-space head")
            head = policy.heads[0]
            t_grid = t_pick / max(horizon - 1, 1)
            pre = head.precompute(bound, t_grid)
            mean, cov, _ = head.eval_node_track(pre, ad.constant(states))
            dz = ad.constant(commands) - mean
            sol = ad.solve_psd(cov, ad.reshape(dz, dz.shape + (1,)))
            quad = ad.sum_(ad.mul(dz, ad.reshape(sol, dz.shape)), axis=-1)
            ll = ad.mul(quad + ad.logdet_psd(cov)
                        + ad.constant(policy.command_dim * math.log(2 * math.pi)),
                        -0.5)
            loss = ad.mul(ad.mean(ll), -1.0)
        else:
            maps = None
            if any(m.kind == "context" for m in policy.task_maps):
                picked = [demos[d] for d in demo_pick]
                maps = dsc.resolve_maps_batch(policy.task_maps, picked)
            pre = policy.precompute(bound, np.zeros(1))
            ll = pol.policy_logpdf_node(policy, bound, pre, 0,
                                        ad.constant(states), ad.constant(commands),
                                        maps=maps)
            loss = ad.mul(ad.mean(ll), -1.0)
        grad = ad.flat_grad(loss, params, bound)
        opt, params = ad.adam_step(opt, params, grad * cov_mask)
    return params


# ------------------------------------------------------------------ Alg. 1

def _theta_features_flag(cfg: TrainConfig, n_members: int) -> bool:
    if cfg.neural_d_theta_features is not None:
        return cfg.neural_d_theta_features
    return n_members > 1


def _shrink_profile(fit: dsc.TimeProfile, ref: dsc.TimeProfile,
                    rho: float) -> dsc.TimeProfile:
    """Blend per-timestep moments toward a reference profile.

    Small-batch MLE precisions are noisy enough to destabilize the
    adversarial updates; shrinking toward the data moments regularizes them
    without moving the equilibrium (there the batch moments equal the data
    moments and the blend is a no-op)."""
    mean = (1 - rho) * fit.means + rho * ref.means
    second = (1 - rho) * fit.second_moments() + rho * ref.second_moments()
    covs = second - np.einsum("ti,tj->tij", mean, mean)
    return dsc.TimeProfile(mean, covs)


def _shrunk_q(q_fit: dsc.QModel, q_ref: dsc.QModel, rho: float) -> dsc.QModel:
    if rho <= 0.0:
        return q_fit
    if q_fit.family in (dsc.FACTORIZED, dsc.TASKSPACE):
        return replace(q_fit, base=_shrink_profile(q_fit.base, q_ref.base, rho),
                       spaces=tuple(_shrink_profile(f, r, rho)
                                    for f, r in zip(q_fit.spaces, q_ref.spaces)))
    # mixture family: defend with the data components so the sample density
    # never collapses to a sliver of the data support (caps the repulsion a
    # freshly escaped mode would otherwise feel from its own tight fit)
    spaces = []
    for fit_mix, ref_mix in zip(q_fit.spaces, q_ref.spaces):
        weights = np.concatenate([(1 - rho) * fit_mix.weights,
                                  rho * ref_mix.weights])
        comps = tuple(fit_mix.components) + tuple(ref_mix.components)
        spaces.append(dsc.GaussianMixture(weights, comps))
    return replace(q_fit, spaces=tuple(spaces))


def _neural_feats_numeric(trajs, maps, strategy, theta_feat):
    return np.stack([dsc.d_features(t.states, t.commands, maps=(), strategy=strategy,
                                    theta_features=theta_feat) for t in trajs], axis=1)


def train_policy(cfg: TrainConfig, demos: Sequence[ro.Trajectory],
                 ensemble: DynamicsEnsemble, policy: pol.PoGPolicy,
                 params: ad.ParamVector, q_data: dsc.QModel,
                 init: InitStateDist, stream: RngStream,
                 neural: Optional[dsc.NeuralDiscriminator] = None):
    """Robust adversarial training: one Adam step on the policy per
    iteration, averaging the discriminator loss over ensemble members."""
    demos = list(demos)
    chunked = cfg.chunk_len is not None
    horizon = cfg.chunk_len if chunked else demos[0].horizon
    n_per = cfg.chunks_per_iter if chunked else cfg.m_samples
    n_members = ensemble.size
    q_samples: list = [None] * n_members
    opt = ad.OptimizerState.fresh(params.size, cfg.lr_policy)
    report = TrainReport()
    neural_start = int(cfg.neural_d_start_frac * cfg.iterations)
    theta_flag = _theta_features_flag(cfg, n_members)
    d_state = None
    q_maps = _q_maps_for(policy, cfg.q_family)
    context_maps = any(m.kind == "context" for m in policy.task_maps)

    for it in range(cfg.iterations):
        t_start = time.perf_counter()
        bound = params.bind()
        member_losses = []
        data_terms, mix_terms, neural_terms = [], [], []
        fake_feats_pool = []
        diverged = False
        for j, member in enumerate(ensemble.members):
            dyn_bound = _const_bound(member.params)
            sub = stream.child("trainer", it, "member", j)
            if chunked:
                chunk_rng = sub.child("chunks").generator()
                batch = ro.make_chunks(demos, cfg.chunk_len, n_per,
                                       cfg.chunk_noise_std, chunk_rng)
                chunk_demos = [demos[d] for d in batch.demo_idx]
                maps = (dsc.resolve_maps_batch(policy.task_maps, chunk_demos)
                        if context_maps else None)
                graph = ro.rollout_graph(member, policy, bound, dyn_bound, init,
                                         horizon, n_per, sub.child("rollout"),
                                         start_states=batch.starts, maps=maps)
                contexts = [d.context for d in chunk_demos]
            else:
                maps = None
                graph = ro.rollout_graph(member, policy, bound, dyn_bound, init,
                                         horizon, n_per, sub.child("rollout"))
                contexts = [None] * n_per
            if graph.max_state_norm > 100.0 * cfg.divergence_scale:
                diverged = True
                break
            trajs = [ro.Trajectory(graph.dt, graph.states.value[:, i],
                                   graph.commands.value[:, i], context=contexts[i])
                     for i in range(n_per)]
            if q_samples[j] is None:
                q_samples[j] = dsc.fit_q(trajs, cfg.q_family, q_maps,
                                         policy.strategy, k=cfg.gmm_components,
                                         em_steps=cfg.em_steps,
                                         rng=sub.child("qfit").generator())
            elif (cfg.q_family == dsc.GMM and cfg.gmm_reinit_every > 0
                  and it % cfg.gmm_reinit_every == 0):
                q_samples[j] = dsc.fit_q(trajs, cfg.q_family, q_maps,
                                         policy.strategy, k=cfg.gmm_components,
                                         em_steps=cfg.em_steps,
                                         rng=sub.child("qreinit").generator())
            else:
                q_samples[j] = dsc.stochastic_mle_update(
                    q_samples[j], trajs, cfg.ema_step, em_steps=cfg.em_steps,
                    em_points=cfg.em_points, rng=sub.child("qupd").generator())
            q_eval = _shrunk_q(q_samples[j], q_data, cfg.q_shrink_to_data)

            ll_qd = dsc.q_loglik_node(q_data, graph.states, graph.commands, maps=maps)
            ll_qs = dsc.q_loglik_node(q_eval, graph.states, graph.commands,
                                      maps=maps)
            # -log q_data + log(q_data + q_samples), in its stable form
            per_traj = ad.softplus(ll_qs - ll_qd)
            data_terms.append(-float(np.mean(ll_qd.value)))
            mix_terms.append(float(np.mean(np.logaddexp(ll_qd.value, ll_qs.value))))
            if neural is not None and it >= neural_start:
                theta_feat = member.feature_vector() if theta_flag else None
                feats = ad.concat([graph.states, graph.commands], axis=-1)
                if theta_flag:
                    tile = np.broadcast_to(theta_feat,
                                           (horizon, n_per, theta_feat.size))
                    feats = ad.concat([feats, ad.constant(tile)], axis=-1)
                score = dsc.neural_d_score_node(neural, feats, time_axis=0)
                per_traj = per_traj - ad.mul(ad.log(score), cfg.neural_d_weight)
                neural_terms.append(-cfg.neural_d_weight
                                    * float(np.mean(np.log(score.value))))
                fake_feats_pool.append(feats.value)
            member_losses.append(ad.mean(per_traj))

        if diverged:
            opt = opt.with_lr(opt.lr * 0.5)
            report.diverged_iterations.append(it)
            report.record(math.nan, math.nan, math.nan, math.nan, opt.lr,
                          time.perf_counter() - t_start)
            log.warning("iteration %d diverged; policy lr halved to %g", it, opt.lr)
            continue

        loss = member_losses[0]
        for extra in member_losses[1:]:
            loss = loss + extra
        loss = ad.div(loss, float(n_members))
        if not np.isfinite(loss.value):
            raise NumericalError(f"non-finite training loss at iteration {it}")
        grad = ad.flat_grad(loss, params, bound)
        opt, params = ad.adam_step(opt, params, grad)

        if neural is not None and it >= neural_start:
            real_rng = stream.child("trainer", it, "dreal").generator()
            picks = real_rng.integers(0, len(demos), size=min(len(demos), n_per))
            member_picks = real_rng.integers(0, n_members, size=picks.size)
            real_feats = []
            for d_idx, m_idx in zip(picks, member_picks):
                theta_feat = (ensemble.members[m_idx].feature_vector()
                              if theta_flag else None)
                real_feats.append(dsc.d_features(
                    demos[d_idx].states[:horizon], demos[d_idx].commands[:horizon],
                    theta_features=theta_feat))
            real = np.stack(real_feats, axis=1)
            fake = np.concatenate(fake_feats_pool, axis=1)
            for _ in range(cfg.neural_d_inner_steps):
                neural, d_state, _ = dsc.neural_d_train_step(
                    neural, real, fake, lr=cfg.lr_neural_d, opt_state=d_state)

        report.record(float(np.mean(data_terms)), float(np.mean(mix_terms)),
                      float(np.mean(neural_terms)) if neural_terms else 0.0,
                      float(np.linalg.norm(grad)), opt.lr,
                      time.perf_counter() - t_start)
        if cfg.checkpoint_every and cfg.out_dir and (it + 1) % cfg.checkpoint_every == 0:
            write_checkpoint(Path(cfg.out_dir) / f"checkpoint_{it + 1}.json",
                             params, ensemble)
        if it % 50 == 0:
            log.info("iteration %d: loss %.4f grad %.3g", it,
                     float(loss.value), float(np.linalg.norm(grad)))

    return params, q_samples, neural, report


# ------------------------------------------------------------------ Alg. 2

def refine_dynamics(cfg: TrainConfig, real_trajs: Sequence[ro.Trajectory],
                    ensemble: DynamicsEnsemble, policy: pol.PoGPolicy,
                    params: ad.ParamVector, init: InitStateDist,
                    stream: RngStream, trainable=("res_", "log_mass", "noise_std")):
    """Fit q on real-system executions, then move every ensemble member's
    parameters so its generated trajectories match them.  The policy is
    frozen throughout."""
    q_theta = dsc.fit_q(list(real_trajs), dsc.FACTORIZED, (), policy.strategy)
    horizon = real_trajs[0].horizon
    pol_bound = _const_bound(params)
    members = list(ensemble.members)
    opts = [ad.OptimizerState.fresh(m.params.size, cfg.lr_dynamics) for m in members]
    q_samples: list = [None] * len(members)
    reports = [TrainReport() for _ in members]

    for it in range(cfg.iterations):
        for j, member in enumerate(members):
            t_start = time.perf_counter()
            dyn_bound = member.params.bind()
            sub = stream.child("refine", it, "member", j)
            graph = ro.rollout_graph(member, policy, pol_bound, dyn_bound, init,
                                     horizon, cfg.m_samples, sub.child("rollout"))
            trajs = ro.graph_to_trajectories(graph)
            if q_samples[j] is None:
                q_samples[j] = dsc.fit_q(trajs, dsc.FACTORIZED, (), policy.strategy)
            else:
                q_samples[j] = dsc.stochastic_mle_update(q_samples[j], trajs,
                                                         cfg.ema_step)
            ll_qt = dsc.q_loglik_node(q_theta, graph.states, graph.commands)
            ll_qs = dsc.q_loglik_node(q_samples[j], graph.states, graph.commands)
            loss = ad.mean(ad.softplus(ll_qs - ll_qt))
            if not np.isfinite(loss.value):
                raise NumericalError(f"non-finite refinement loss at iteration {it}")
            grad = ad.flat_grad(loss, member.params, dyn_bound)
            mask = np.zeros_like(grad)
            for name, (start, stop, _) in member.params.layout.items():
                if any(name.startswith(p) for p in trainable):
                    mask[start:stop] = 1.0
            opts[j], new_params = ad.adam_step(opts[j], member.params, grad * mask)
            members[j] = replace(member, params=new_params)
            reports[j].record(-float(np.mean(ll_qt.value)),
                              float(np.mean(np.logaddexp(ll_qt.value, ll_qs.value))),
                              0.0, float(np.linalg.norm(grad * mask)),
                              cfg.lr_dynamics, time.perf_counter() - t_start)
    return DynamicsEnsemble(tuple(members)), reports


@dataclass
class OuterReport:
    rounds: list = field(default_factory=list)
    params: Optional[ad.ParamVector] = None
    ensemble: Optional[DynamicsEnsemble] = None


def generator_rollouts(ensemble: DynamicsEnsemble, policy, params, init,
                       horizon: int, per_member: int, stream: RngStream) -> list:
    out = []
    plan = ro.RolloutPlan(horizon=horizon, samples=per_member)
    for j, member in enumerate(ensemble.members):
        out.extend(ro.rollout(member, policy, params, init, plan,
                              stream.child("gen", j)))
    return out


def outer_loop(cfg: TrainConfig, demos: Sequence[ro.Trajectory],
               real_system: DynamicsModel, ensemble: DynamicsEnsemble,
               policy: pol.PoGPolicy, params: ad.ParamVector,
               init: InitStateDist, stream: RngStream, rounds: int,
               refine_cfg: Optional[TrainConfig] = None) -> OuterReport:
    """Alternate policy training and dynamics refinement against executions
    on the (simulated) real system, tracking distribution distances."""
    demos = list(demos)
    refine_cfg = refine_cfg or cfg
    q_data = dsc.fit_q(demos, cfg.q_family, _q_maps_for(policy, cfg.q_family),
                       policy.strategy, k=cfg.gmm_components,
                       rng=stream.child("qdata").generator())
    report = OuterReport()
    horizon = demos[0].horizon
    for rnd in range(rounds):
        params, _, _, train_rep = train_policy(
            cfg, demos, ensemble, policy, params, q_data, init,
            stream.child("round", rnd, "policy"))
        plan = ro.RolloutPlan(horizon=horizon, samples=cfg.n_real)
        real_trajs = ro.rollout(real_system, policy, params, init, plan,
                                stream.child("round", rnd, "real"),
                                origin="real-system")
        gen_before = generator_rollouts(ensemble, policy, params, init, horizon,
                                        cfg.m_samples,
                                        stream.child("round", rnd, "before"))
        bd_before = met.bd_traj(real_trajs, gen_before)
        ensemble, refine_reps = refine_dynamics(
            refine_cfg, real_trajs, ensemble, policy, params, init,
            stream.child("round", rnd, "refine"))
        gen_after = generator_rollouts(ensemble, policy, params, init, horizon,
                                       cfg.m_samples,
                                       stream.child("round", rnd, "after"))
        bd_after = met.bd_traj(real_trajs, gen_after)
        bd_real_demo = met.bd_traj(demos, real_trajs)
        report.rounds.append({
            "bd_generator_vs_real_before": bd_before,
            "bd_generator_vs_real_after": bd_after,
            "bd_real_vs_demos": bd_real_demo,
            "train_iterations": train_rep.iterations,
        })
        log.info("round %d: BD gen/real %.4f -> %.4f; BD real/demos %.4f",
                 rnd, bd_before, bd_after, bd_real_demo)
    report.params = params
    report.ensemble = ensemble
    return report


# ------------------------------------------------------------------ IO

def write_checkpoint(path, params: ad.ParamVector,
                     ensemble: Optional[DynamicsEnsemble] = None) -> None:
    doc = {
        "policy": {
            "values": params.values.tolist(),
            "layout": {k: [v[0], v[1], list(v[2])] for k, v in params.layout.items()},
        },
    }
    if ensemble is not None:
        doc["ensemble"] = [
            {"values": m.params.values.tolist(),
             "layout": {k: [v[0], v[1], list(v[2])] for k, v in m.params.layout.items()}}
            for m in ensemble.members
        ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_param_vector(doc: dict) -> ad.ParamVector:
    layout = {k: (v[0], v[1], tuple(v[2])) for k, v in doc["layout"].items()}
    return ad.ParamVector(np.asarray(doc["values"], dtype=float), layout)
