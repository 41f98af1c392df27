"""Scripted desk-scale experiments: letters robustness, the two-frame
time-independent task, dynamics refinement, and high-dimensional
concatenated letters.

Each experiment is a pure function of its config and seed: rerunning with
the same seed single-threaded reproduces metrics.json byte for byte.
Wall-clock goes to run_info.json, never into the metrics payload.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import baselines as bl
from . import datasets as data
from . import discriminator as dsc
from . import dynamics as dyn
from . import metrics as met
from . import policy as pol
from . import rollout as ro
from . import taskspace as ts
from . import training as tr
from .errors import ValidationError
from .gaussians import gauss_mle
from .rng import RngStream

log = logging.getLogger("gamp.experiments")

EXPERIMENTS = ("letters-feedback", "twoframe-independent", "refine-dynamics",
               "highdim-robustness")


# ------------------------------------------------------------------ configs

@dataclass(frozen=True)
class LettersConfig:
    letters: tuple = ("C", "N", "U")
    n_demos: int = 13
    horizon: int = 200
    dt: float = 0.01
    variability: float = 0.02
    mass: float = 1.0
    force_noise_std: float = 10.0
    init_pos_noise_std: float = 0.035
    n_basis: int = 30
    imitation_steps: int = 300
    iterations: int = 250
    m_samples: int = 20
    lr_policy: float = 3e-3
    ema_step: float = 1.0
    boost_gain: float = 15.0
    boost_vel_gain: float = 40.0
    eval_samples: int = 20
    gmr_components: int = 8
    gmr_em_steps: int = 30
    lqt_control_penalty: float = 1e-3
    promp_basis: int = 30


@dataclass(frozen=True)
class TwoFrameConfig:
    n_situations: int = 10
    demos_per_situation: int = 5
    train_situations: int = 5
    horizon: int = 200
    dt: float = 0.01
    variability: float = 0.015
    widths: tuple = (64, 64)
    gmm_components: int = 20
    em_steps: int = 10
    em_points: int = 1000
    gmm_reinit_every: int = 50
    chunk_len: int = 25
    chunks_per_iter: int = 64
    chunk_noise_std: float = 0.03
    imitation_steps: int = 400
    iterations: int = 400
    lr_policy: float = 3e-3
    eval_rollouts_per_situation: int = 5


@dataclass(frozen=True)
class RefineConfig:
    letter: str = "G"
    n_demos: int = 10
    horizon: int = 100
    dt: float = 0.02
    variability: float = 0.02
    mass: float = 3.0
    residual_std: float = 5.0
    process_noise_std: float = 0.5
    l_members: int = 5
    policy_iterations: int = 200
    refine_iterations: int = 200
    m_samples: int = 10
    n_real: int = 10
    lr_policy: float = 3e-2
    lr_dynamics: float = 5e-3
    imitation_steps: int = 200
    n_basis: int = 20
    ensemble_seeds: tuple = (0, 1, 2, 3, 4)
    gen_rollouts_per_member: int = 4


@dataclass(frozen=True)
class HighDimConfig:
    dims: tuple = (4, 8, 16)
    concats_per_dim: int = 5
    n_demos: int = 40
    horizon: int = 150
    dt: float = 0.01
    variability: float = 0.02
    widths: tuple = (64, 64)
    imitation_steps: int = 300
    iterations: int = 250
    m_samples: int = 16
    lr_policy: float = 3e-3
    init_noise_std: float = 0.02
    eval_rollouts: int = 10


CONFIG_TYPES = {
    "letters-feedback": LettersConfig,
    "twoframe-independent": TwoFrameConfig,
    "refine-dynamics": RefineConfig,
    "highdim-robustness": HighDimConfig,
}


# ------------------------------------------------------------------ report

def _native(x):
    if isinstance(x, dict):
        return {k: _native(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_native(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return _native(x.tolist())
    return x


@dataclass
class MetricReport:
    experiment: str
    seed: int
    conditions: dict
    summary: dict
    sample_counts: dict
    runtime_s: float = 0.0

    def metrics_payload(self) -> dict:
        return _native({
            "schema_version": 1,
            "experiment": self.experiment,
            "seed": self.seed,
            "conditions": self.conditions,
            "summary": self.summary,
            "sample_counts": self.sample_counts,
        })

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.json", "w") as fh:
            json.dump(self.metrics_payload(), fh, sort_keys=True, indent=1)
        with open(out / "run_info.json", "w") as fh:
            json.dump({"experiment": self.experiment, "runtime_s": self.runtime_s},
                      fh, sort_keys=True, indent=1)
        self._write_csv(out / "metrics.csv")

    def _write_csv(self, path) -> None:
        rows = ["experiment,condition,metric,value"]

        def walk(prefix, obj):
            if isinstance(obj, dict):
                for k in sorted(obj):
                    walk(f"{prefix}/{k}" if prefix else str(k), obj[k])
            elif isinstance(obj, (int, float)):
                cond, _, metric = prefix.rpartition("/")
                rows.append(f"{self.experiment},{cond},{metric},{obj!r}")

        walk("", _native(self.conditions))
        with open(path, "w") as fh:
            fh.write("\n".join(rows) + "\n")


def write_overlay_svg(path, demos_xy: Sequence[np.ndarray],
                      samples_xy: Sequence[np.ndarray]) -> None:
    """Demos in gray under colored sample paths, one SVG, no dependencies."""
    all_pts = np.concatenate([np.asarray(c) for c in list(demos_xy) + list(samples_xy)])
    lo = all_pts.min(axis=0) - 0.05
    hi = all_pts.max(axis=0) + 0.05
    span = np.maximum(hi - lo, 1e-6)
    size = 480.0

    def path_for(curve):
        pts = (np.asarray(curve) - lo) / span * size
        pts[:, 1] = size - pts[:, 1]
        return "M " + " L ".join(f"{x:.2f} {y:.2f}" for x, y in pts)

    palette = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0f}" '
             f'height="{size:.0f}" viewBox="0 0 {size:.0f} {size:.0f}">']
    for curve in demos_xy:
        parts.append(f'<path d="{path_for(curve)}" fill="none" stroke="#bbbbbb" '
                     'stroke-width="1.5"/>')
    for i, curve in enumerate(samples_xy):
        color = palette[i % len(palette)]
        parts.append(f'<path d="{path_for(curve)}" fill="none" stroke="{color}" '
                     'stroke-width="1.0" stroke-opacity="0.8"/>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


# ------------------------------------------------------------------ letters

def _letter_regimes(cfg: LettersConfig):
    return (dyn.PerturbationRegime(0.0, 0.0, "deterministic"),
            dyn.PerturbationRegime(cfg.force_noise_std, 0.0, "force_noise"),
            dyn.PerturbationRegime(0.0, cfg.init_pos_noise_std, "init_noise"))


def _demo_init_dist(demos) -> dyn.InitStateDist:
    fit = gauss_mle(np.stack([d.states[0] for d in demos]))
    return dyn.InitStateDist(fit.mean, fit.cov)


def _boost_feedback_gains(policy, params, demos, gain, vel_gain):
    """Move the gains to a noise-rejecting operating point and refit the
    feed-forward track so the mean command at the demo mean state is
    unchanged.  Adversarial training then only has to polish covariances and
    local shape instead of climbing the gain logits from scratch."""
    head = policy.heads[0]
    states = np.stack([d.states for d in demos])
    commands = np.stack([d.commands for d in demos])
    k = head.dim
    x_bar = states[:, :, :k].mean(axis=0)
    v_bar = states[:, :, k:].mean(axis=0)
    u_bar = commands.mean(axis=0)
    target = u_bar + gain * x_bar + vel_gain * v_bar
    phi = head.basis.features(np.linspace(0.0, 1.0, target.shape[0]))
    w_ffwd = np.linalg.solve(phi.T @ phi + 1e-8 * np.eye(head.basis.count),
                             phi.T @ target)
    n = head.basis.count
    params = params.updated(f"{head.name}.gain_logits", np.full((n, k), np.log(gain)))
    params = params.updated(f"{head.name}.vel_gain_logits",
                            np.full((n, k), np.log(vel_gain)))
    return params.updated(f"{head.name}.ffwd", w_ffwd)


def _letters_one(cfg: LettersConfig, letter: str, stream: RngStream) -> dict:
    demos = list(data.synth_letters(
        letter, cfg.n_demos, cfg.horizon, cfg.dt, cfg.variability,
        stream.child("data").generator(), mass=cfg.mass).demos)
    strategy = ts.ControlStrategy(ts.ACCELERATION)
    init = _demo_init_dist(demos)
    base = dyn.make_model(dyn.DOUBLE_INTEGRATOR, cfg.dt, 4, 2, mass=cfg.mass)
    regimes = _letter_regimes(cfg)
    ensemble = dyn.DynamicsEnsemble(tuple(dyn.apply_regime(base, r) for r in regimes))

    policy = pol.make_feedback_policy(4, 2, strategy=strategy, n_basis=cfg.n_basis)
    params = policy.init_params(stream.child("init").generator(),
                                gain0=3.0, vel_gain0=2.0, sigma0=0.3)
    params = tr.imitation_init(demos, policy, params, steps=cfg.imitation_steps,
                               lr=2e-2, stream=stream.child("imitation"),
                               fit_covariance=False)
    params = _boost_feedback_gains(policy, params, demos, cfg.boost_gain,
                                   cfg.boost_vel_gain)
    q_data = dsc.fit_q(demos, dsc.FACTORIZED, (), strategy)
    train_cfg = tr.TrainConfig(iterations=cfg.iterations, m_samples=cfg.m_samples,
                               lr_policy=cfg.lr_policy, ema_step=cfg.ema_step)
    params, _, _, _ = tr.train_policy(train_cfg, demos, ensemble, policy, params,
                                      q_data, init, stream.child("train"))

    # baselines: per-timestep state targets tracked with the Riccati controller
    a_mat = np.block([[np.eye(2), cfg.dt * np.eye(2)],
                      [np.zeros((2, 2)), np.eye(2)]])
    b_mat = np.block([[np.zeros((2, 2))], [(cfg.dt / cfg.mass) * np.eye(2)]])
    r_mat = cfg.lqt_control_penalty * np.eye(2)

    gmm_joint = bl.fit_time_state_gmm(demos, cfg.gmr_components, cfg.gmr_em_steps,
                                      rng=stream.child("gmr").generator())
    t_norm = np.linspace(0.0, 1.0, cfg.horizon)
    gmr_cond = [bl.gmr(gmm_joint, t) for t in t_norm]
    gmr_sol = bl.lqt_solve(a_mat, b_mat, np.stack([g.mean for g in gmr_cond]),
                           np.stack([g.precision for g in gmr_cond]), r_mat)

    promp = bl.promp_fit(demos, n_basis=cfg.promp_basis, pos_dims=2)
    promp_marg = [bl.promp_marginal(promp, t) for t in t_norm]
    promp_sol = bl.lqt_solve(a_mat, b_mat, np.stack([g.mean for g in promp_marg]),
                             np.stack([g.precision for g in promp_marg]), r_mat)

    out = {}
    eval_plan = ro.RolloutPlan(horizon=cfg.horizon, samples=cfg.eval_samples)
    for regime in regimes:
        model_r = dyn.apply_regime(base, regime)
        estream = stream.child("eval", regime.regime_id)
        gamp_rollouts = ro.rollout(model_r, policy, params, init, eval_plan,
                                   estream.child("gamp"))
        starts = init.sample(estream.child("starts").generator()
                             .standard_normal((cfg.eval_samples, 4)))
        if regime.init_pos_std > 0:
            starts[:, :2] += regime.init_pos_std * (
                estream.child("startnoise").generator()
                .standard_normal((cfg.eval_samples, 2)))
        rows = {"gamp": gamp_rollouts}
        rows["gmr_lqt"] = bl.lqt_rollout(model_r, gmr_sol, starts,
                                         estream.child("gmr"))
        rows["promp_lqt"] = bl.lqt_rollout(model_r, promp_sol, starts,
                                           estream.child("promp"))
        out[regime.regime_id] = {
            name: {"mse": met.mse_mean_traj(demos, rolls),
                   "bd": met.bd_traj(demos, rolls)}
            for name, rolls in rows.items()
        }
    out["_rollout_xy"] = {
        "demos": [d.states[:, :2] for d in demos],
        "gamp": [t.states[:, :2] for t in gamp_rollouts],
    }
    return out


def run_letters(cfg: LettersConfig, seed: int = 0, out_dir=None,
                threads: int = 1) -> MetricReport:
    t0 = time.perf_counter()
    stream = RngStream(seed)

    def job(letter):
        return letter, _letters_one(cfg, letter, stream.child("letter", letter))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = dict(pool.map(job, cfg.letters))
    else:
        results = dict(job(letter) for letter in cfg.letters)

    conditions = {}
    plots = {}
    for letter in cfg.letters:
        res = dict(results[letter])
        plots[letter] = res.pop("_rollout_xy")
        conditions[letter] = res

    summary = {}
    for method in ("gamp", "gmr_lqt", "promp_lqt"):
        for regime in ("deterministic", "force_noise", "init_noise"):
            for metric in ("mse", "bd"):
                vals = [conditions[let][regime][method][metric]
                        for let in cfg.letters]
                summary[f"{method}.{regime}.{metric}.mean"] = float(np.mean(vals))
                summary[f"{method}.{regime}.{metric}.std"] = float(np.std(vals))

    report = MetricReport("letters-feedback", seed, conditions, summary,
                          {"demos_per_letter": cfg.n_demos,
                           "eval_samples": cfg.eval_samples},
                          time.perf_counter() - t0)
    if out_dir is not None:
        report.write(out_dir)
        for letter, xy in plots.items():
            write_overlay_svg(Path(out_dir) / f"letters_{letter}.svg",
                              xy["demos"], xy["gamp"])
    return report


# ------------------------------------------------------------------ two-frame

def _twoframe_policy(cfg: TwoFrameConfig):
    maps = (ts.TaskMap.identity(2), ts.TaskMap.from_context(2, 1))
    strategy = ts.ControlStrategy(ts.VELOCITY)
    return pol.make_mlp_policy(2, 2, task_maps=maps, strategy=strategy,
                               widths=cfg.widths)


def _situation_groups(demo_set: data.DemoSet, per_situation: int):
    demos = list(demo_set.demos)
    return [demos[i : i + per_situation]
            for i in range(0, len(demos), per_situation)]


def _twoframe_eval(policy, params, demos_by_situation, cfg, stream, model, init_extra=0.0):
    """Full rollouts from each demo's initial state, MAE to that situation's
    demos, plus doubled-horizon divergence stats."""
    maes = []
    max_final = 0.0
    for s_idx, sit_demos in enumerate(demos_by_situation):
        maps = dsc.resolve_maps_batch(policy.task_maps, sit_demos)
        starts = np.stack([d.states[0] for d in sit_demos])
        estream = stream.child("situation", s_idx)
        rolls = ro.rollout(model, policy, params,
                           dyn.InitStateDist(starts[0], np.zeros((2, 2))),
                           ro.RolloutPlan(cfg.horizon, starts.shape[0]),
                           estream, start_states=starts, maps=maps)
        maes.append(met.mae_closest(rolls, sit_demos))
        long = ro.rollout(model, policy, params,
                          dyn.InitStateDist(starts[0], np.zeros((2, 2))),
                          ro.RolloutPlan(2 * cfg.horizon, starts.shape[0]),
                          estream.child("long"), start_states=starts, maps=maps)
        finals = np.stack([t.states[-1] for t in long])
        demo_final = np.stack([d.states[-1] for d in sit_demos]).mean(axis=0)
        max_final = max(max_final,
                        float(np.linalg.norm(finals - demo_final, axis=1).max()))
    return float(np.mean(maes)), float(np.std(maes)), max_final


def run_twoframe(cfg: TwoFrameConfig, seed: int = 0, out_dir=None,
                 threads: int = 1) -> MetricReport:
    t0 = time.perf_counter()
    stream = RngStream(seed)
    demo_set, _ = data.synth_two_frame(
        cfg.n_situations, cfg.demos_per_situation, cfg.horizon, cfg.dt,
        cfg.variability, stream.child("data").generator())
    groups = _situation_groups(demo_set, cfg.demos_per_situation)
    train_groups = groups[: cfg.train_situations]
    test_groups = groups[cfg.train_situations :]
    train_demos = [d for g in train_groups for d in g]

    model = dyn.make_model(dyn.SINGLE_INTEGRATOR, cfg.dt, 2, 2)
    init = _demo_init_dist(train_demos)
    policy = _twoframe_policy(cfg)
    base_params = policy.init_params(stream.child("init").generator(), sigma0=0.3)
    imitation = tr.imitation_init(train_demos, policy, base_params,
                                  steps=cfg.imitation_steps, lr=5e-3,
                                  stream=stream.child("imitation"))
    q_data = dsc.fit_q(train_demos, dsc.GMM, policy.task_maps, policy.strategy,
                       k=cfg.gmm_components, em_steps=30,
                       rng=stream.child("qdata").generator())
    ensemble = dyn.DynamicsEnsemble((model,))

    def gan_train(noise_std, tag):
        train_cfg = tr.TrainConfig(
            iterations=cfg.iterations, m_samples=cfg.chunks_per_iter,
            lr_policy=cfg.lr_policy, q_family=dsc.GMM,
            gmm_components=cfg.gmm_components, em_steps=cfg.em_steps,
            em_points=cfg.em_points, gmm_reinit_every=cfg.gmm_reinit_every,
            chunk_len=cfg.chunk_len, chunks_per_iter=cfg.chunks_per_iter,
            chunk_noise_std=noise_std)
        fitted, _, _, _ = tr.train_policy(train_cfg, train_demos, ensemble, policy,
                                          imitation, q_data, init,
                                          stream.child("train", tag))
        return fitted

    variants = {
        "imitation": imitation,
        "gamp": gan_train(0.0, "plain"),
        "gamp_noise": gan_train(cfg.chunk_noise_std, "noise"),
    }

    conditions = {}
    for name, fitted in variants.items():
        estream = stream.child("eval", name)
        train_mae, train_std, train_far = _twoframe_eval(
            policy, fitted, train_groups, cfg, estream.child("train"), model)
        test_mae, test_std, test_far = _twoframe_eval(
            policy, fitted, test_groups, cfg, estream.child("test"), model)
        conditions[name] = {
            "train": {"mae": train_mae, "mae_std": train_std},
            "test": {"mae": test_mae, "mae_std": test_std},
            "max_final_dist_2T": max(train_far, test_far),
        }

    summary = {f"{name}.{split}.mae": conditions[name][split]["mae"]
               for name in variants for split in ("train", "test")}
    report = MetricReport("twoframe-independent", seed, conditions, summary,
                          {"train_situations": len(train_groups),
                           "test_situations": len(test_groups),
                           "demos_per_situation": cfg.demos_per_situation},
                          time.perf_counter() - t0)
    if out_dir is not None:
        report.write(out_dir)
    return report


# ------------------------------------------------------------------ refine

def _refine_truth(cfg: RefineConfig, stream: RngStream, probes):
    hidden = dyn.init_residual_ensemble(
        1, cfg.dt, 4, 2, probes, stream.child("truth").generator(),
        mass=cfg.mass, target_std=cfg.residual_std,
        noise_std=cfg.process_noise_std)
    return hidden.members[0]


def _refine_policy(cfg: RefineConfig, demos, stream):
    strategy = ts.ControlStrategy(ts.ACCELERATION)
    policy = pol.make_feedback_policy(4, 2, strategy=strategy, n_basis=cfg.n_basis)
    params = policy.init_params(stream.child("pinit").generator(),
                                gain0=3.0, vel_gain0=2.0, sigma0=0.3)
    params = tr.imitation_init(demos, policy, params, steps=cfg.imitation_steps,
                               lr=2e-2, stream=stream.child("imitation"))
    return policy, params


def _train_first_policy(cfg, demos, ensemble, policy, params, q_data, init, stream):
    train_cfg = tr.TrainConfig(iterations=cfg.policy_iterations,
                               m_samples=cfg.m_samples, lr_policy=cfg.lr_policy,
                               ema_step=0.5)
    fitted, _, _, _ = tr.train_policy(train_cfg, demos, ensemble, policy, params,
                                      q_data, init, stream)
    return fitted


def run_refine(cfg: RefineConfig, seed: int = 0, out_dir=None,
               threads: int = 1) -> MetricReport:
    t0 = time.perf_counter()
    stream = RngStream(seed)
    demos = list(data.synth_letters(
        cfg.letter, cfg.n_demos, cfg.horizon, cfg.dt, cfg.variability,
        stream.child("data").generator(), mass=cfg.mass).demos)
    init = _demo_init_dist(demos)
    probes = np.concatenate([d.states for d in demos])[::5]
    truth = _refine_truth(cfg, stream, probes)
    q_data = dsc.fit_q(demos, dsc.FACTORIZED, (), ts.ControlStrategy(ts.ACCELERATION))

    # (a) one outer round with the seed-0 ensemble: BD must drop after refining
    policy, params0 = _refine_policy(cfg, demos, stream.child("main"))
    ens = dyn.init_residual_ensemble(
        cfg.l_members, cfg.dt, 4, 2, probes,
        stream.child("ens", 0).generator(), mass=cfg.mass,
        target_std=cfg.residual_std, noise_std=cfg.process_noise_std)
    params = _train_first_policy(cfg, demos, ens, policy, params0, q_data, init,
                                 stream.child("main", "train"))
    real_plan = ro.RolloutPlan(cfg.horizon, cfg.n_real)
    real = ro.rollout(truth, policy, params, init, real_plan,
                      stream.child("main", "real"), origin="real-system")
    gen_before = tr.generator_rollouts(ens, policy, params, init, cfg.horizon,
                                       cfg.gen_rollouts_per_member,
                                       stream.child("main", "before"))
    bd_before = met.bd_traj(real, gen_before)
    refine_cfg = tr.TrainConfig(iterations=cfg.refine_iterations,
                                m_samples=cfg.m_samples,
                                lr_dynamics=cfg.lr_dynamics, ema_step=0.5)
    refined, _ = tr.refine_dynamics(refine_cfg, real, ens, policy, params, init,
                                    stream.child("main", "refine"))
    gen_after = tr.generator_rollouts(refined, policy, params, init, cfg.horizon,
                                      cfg.gen_rollouts_per_member,
                                      stream.child("main", "after"))
    bd_after = met.bd_traj(real, gen_after)

    # (b) first-policy quality on the real system: L members vs a single one
    def first_policy_bd(l_members: int, ens_seed: int) -> float:
        sub = stream.child("sweep", l_members, ens_seed)
        members = dyn.init_residual_ensemble(
            l_members, cfg.dt, 4, 2, probes, sub.child("ens").generator(),
            mass=cfg.mass, target_std=cfg.residual_std,
            noise_std=cfg.process_noise_std)
        fitted = _train_first_policy(cfg, demos, members, policy, params0,
                                     q_data, init, sub.child("train"))
        executed = ro.rollout(truth, policy, fitted, init, real_plan,
                              sub.child("real"), origin="real-system")
        return met.bd_traj(demos, executed)

    def sweep(l_members):
        return [first_policy_bd(l_members, s) for s in cfg.ensemble_seeds]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            bd_l, bd_1 = pool.map(sweep, [cfg.l_members, 1])
    else:
        bd_l, bd_1 = sweep(cfg.l_members), sweep(1)

    conditions = {
        "refinement": {"bd_before": bd_before, "bd_after": bd_after,
                       "reduction": 1.0 - bd_after / bd_before},
        "first_policy": {
            f"ensemble_L{cfg.l_members}": {"bd_per_seed": bd_l,
                                           "bd_mean": float(np.mean(bd_l))},
            "ensemble_L1": {"bd_per_seed": bd_1, "bd_mean": float(np.mean(bd_1))},
        },
    }
    summary = {
        "bd_before": bd_before,
        "bd_after": bd_after,
        "bd_first_policy_ensemble": float(np.mean(bd_l)),
        "bd_first_policy_single": float(np.mean(bd_1)),
    }
    report = MetricReport("refine-dynamics", seed, conditions, summary,
                          {"n_real": cfg.n_real, "seeds": len(cfg.ensemble_seeds)},
                          time.perf_counter() - t0)
    if out_dir is not None:
        report.write(out_dir)
    return report


# ------------------------------------------------------------------ high-dim

def _highdim_one(cfg: HighDimConfig, d_state: int, concat_idx: int,
                 stream: RngStream) -> dict:
    letter_pool = sorted(data.LETTER_POINTS)
    rng = stream.child("letters").generator()
    picks = [letter_pool[i] for i in rng.integers(0, len(letter_pool),
                                                  size=d_state // 2)]
    demo_set = data.synth_concat_letters(picks, cfg.n_demos, cfg.horizon, cfg.dt,
                                         cfg.variability,
                                         stream.child("data").generator())
    demos = list(demo_set.demos)
    strategy = ts.ControlStrategy(ts.VELOCITY)
    policy = pol.make_mlp_policy(d_state, d_state, strategy=strategy,
                                 widths=cfg.widths)
    params = policy.init_params(stream.child("init").generator(), sigma0=0.2)
    params = tr.imitation_init(demos, policy, params, steps=cfg.imitation_steps,
                               lr=5e-3, stream=stream.child("imitation"))
    init = _demo_init_dist(demos)
    model = dyn.make_model(dyn.SINGLE_INTEGRATOR, cfg.dt, d_state, d_state)
    train_model = dyn.apply_regime(model, dyn.PerturbationRegime(
        init_pos_std=cfg.init_noise_std))
    q_data = dsc.fit_q(demos, dsc.FACTORIZED, (), strategy)
    train_cfg = tr.TrainConfig(iterations=cfg.iterations, m_samples=cfg.m_samples,
                               lr_policy=cfg.lr_policy, ema_step=0.3)
    params, _, _, _ = tr.train_policy(train_cfg, demos,
                                      dyn.DynamicsEnsemble((train_model,)),
                                      policy, params, q_data, init,
                                      stream.child("train"))
    # doubled-horizon rollouts with perturbed initial states
    eval_model = dyn.apply_regime(model, dyn.PerturbationRegime(
        init_pos_std=cfg.init_noise_std))
    rolls = ro.rollout(eval_model, policy, params, init,
                       ro.RolloutPlan(2 * cfg.horizon, cfg.eval_rollouts),
                       stream.child("eval"))
    stats = met.divergence_stats(rolls, demos)
    return {"letters": "".join(picks),
            "final_state_std": stats.final_state_std,
            "mean_final_dist": stats.mean_final_dist,
            "outliers": list(stats.outliers)}


def run_highdim(cfg: HighDimConfig, seed: int = 0, out_dir=None,
                threads: int = 1) -> MetricReport:
    t0 = time.perf_counter()
    stream = RngStream(seed)
    jobs = [(d, i) for d in cfg.dims for i in range(cfg.concats_per_dim)]

    def job(spec):
        d_state, idx = spec
        return spec, _highdim_one(cfg, d_state, idx, stream.child("run", d_state, idx))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = dict(pool.map(job, jobs))
    else:
        results = dict(job(s) for s in jobs)

    conditions = {}
    for d_state in cfg.dims:
        conditions[f"dim{d_state}"] = {
            f"concat{i}": results[(d_state, i)] for i in range(cfg.concats_per_dim)}
    stds = [results[j]["final_state_std"] for j in jobs]
    summary = {"max_final_state_std": float(np.max(stds)),
               "mean_final_state_std": float(np.mean(stds))}
    report = MetricReport("highdim-robustness", seed, conditions, summary,
                          {"runs": len(jobs), "eval_rollouts": cfg.eval_rollouts},
                          time.perf_counter() - t0)
    if out_dir is not None:
        report.write(out_dir)
    return report


# ------------------------------------------------------------------ dispatch

def build_config(name: str, overrides: Optional[dict] = None):
    if name not in EXPERIMENTS:
        raise ValidationError(f"unknown experiment '{name}'; choose from {EXPERIMENTS}")
    base = CONFIG_TYPES[name]()
    if not overrides:
        return base
    clean = {}
    for key, value in overrides.items():
        if not hasattr(base, key):
            raise ValidationError(f"unknown config field '{key}' for {name}")
        if isinstance(getattr(base, key), tuple) and isinstance(value, list):
            value = tuple(value)
        clean[key] = value
    return replace(base, **clean)


def run_experiment(name: str, seed: int = 0, out_dir=None, threads: int = 1,
                   overrides: Optional[dict] = None) -> MetricReport:
    cfg = build_config(name, overrides)
    runner = {"letters-feedback": run_letters,
              "twoframe-independent": run_twoframe,
              "refine-dynamics": run_refine,
              "highdim-robustness": run_highdim}[name]
    return runner(cfg, seed=seed, out_dir=out_dir, threads=threads)
