"""Command-line interface.

Subcommands: synth, fit-q, train, refine, rollout, eval, experiment,
gradcheck.  Exit codes: 0 success, 1 validation/usage error, 2 numerical
failure.  The GAMP_LOG environment variable (error|info|debug) sets the log
level.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as cfgmod
from . import datasets as data
from . import discriminator as dsc
from . import dynamics as dyn
from . import experiments as ex
from . import metrics as met
from . import policy as pol
from . import rollout as ro
from . import taskspace as ts
from . import training as tr
from .errors import NumericalError, ValidationError
from .rng import RngStream

log = logging.getLogger("gamp.cli")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("GAMP_LOG", "error"), logging.ERROR)
    logging.basicConfig(level=level, format="%(name)s %(levelname)s %(message)s")


def _build_parser() -> _Parser:
    parser = _Parser(prog="gamp", description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--out", type=Path, default=Path("gamp_out"))
    parser.add_argument("--config", type=Path, default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic demonstration set")
    p.add_argument("--letter", default="N")
    p.add_argument("--n", type=int, default=13)
    p.add_argument("--horizon", type=int, default=200)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--variability", type=float, default=0.02)
    p.add_argument("--kind", choices=("double", "single"), default="double")
    p.add_argument("--mass", type=float, default=1.0)
    p.add_argument("--file", type=Path, required=True)

    p = sub.add_parser("fit-q", help="fit a trajectory density on a demo set")
    p.add_argument("--demos", type=Path, required=True)
    p.add_argument("--family", choices=(dsc.FACTORIZED, dsc.TASKSPACE, dsc.GMM),
                   default=dsc.FACTORIZED)
    p.add_argument("--components", type=int, default=20)
    p.add_argument("--file", type=Path, required=True)

    p = sub.add_parser("train", help="adversarial policy training on a demo set")
    p.add_argument("--demos", type=Path, required=True)

    p = sub.add_parser("refine", help="policy training plus dynamics refinement")

    p = sub.add_parser("rollout", help="sample trajectories from a checkpoint")
    p.add_argument("--demos", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--horizon", type=int, default=None)

    p = sub.add_parser("eval", help="distance metrics between two trajectory sets")
    p.add_argument("--demos", type=Path, required=True)
    p.add_argument("--rollouts", type=Path, required=True)

    p = sub.add_parser("experiment", help="run a scripted experiment")
    p.add_argument("--name", choices=ex.EXPERIMENTS, required=True)

    p = sub.add_parser("gradcheck",
                       help="verify rollout-loss gradients against differences")
    p.add_argument("--horizon", type=int, default=20)
    p.add_argument("--samples", type=int, default=3)
    p.add_argument("--basis", type=int, default=8)

    sub.add_parser("defaults", help="print the full default configuration")
    return parser


def _system_for(demo_set: data.DemoSet, mass: float = 1.0):
    if demo_set.state_dim == 2 * demo_set.command_dim:
        model = dyn.make_model(dyn.DOUBLE_INTEGRATOR, demo_set.dt,
                               demo_set.state_dim, demo_set.command_dim, mass=mass)
        strategy = ts.ControlStrategy(ts.ACCELERATION)
    elif demo_set.state_dim == demo_set.command_dim:
        model = dyn.make_model(dyn.SINGLE_INTEGRATOR, demo_set.dt,
                               demo_set.state_dim, demo_set.command_dim)
        strategy = ts.ControlStrategy(ts.VELOCITY)
    else:
        raise ValidationError("cannot infer an integrator for these demo dims")
    return model, strategy


def _init_dist(demos):
    from .gaussians import gauss_mle

    fit = gauss_mle(np.stack([d.states[0] for d in demos]))
    return dyn.InitStateDist(fit.mean, fit.cov)


def _cmd_synth(args) -> int:
    demo_set = data.synth_letters(args.letter, args.n, args.horizon, args.dt,
                                  args.variability,
                                  RngStream(args.seed).child("synth").generator(),
                                  mass=args.mass, kind=args.kind)
    args.file.parent.mkdir(parents=True, exist_ok=True)
    data.save_demoset(demo_set, args.file)
    print(f"wrote {demo_set.n_demos} demos of horizon {demo_set.horizon} to {args.file}")
    return 0


def _cmd_fit_q(args) -> int:
    demo_set = data.load_demoset(args.demos)
    _, strategy = _system_for(demo_set)
    q = dsc.fit_q(list(demo_set.demos), args.family, (), strategy,
                  k=args.components,
                  rng=RngStream(args.seed).child("fitq").generator())
    args.file.parent.mkdir(parents=True, exist_ok=True)
    with open(args.file, "w") as fh:
        json.dump(dsc.q_to_dict(q), fh, sort_keys=True)
    print(f"fitted {args.family} density -> {args.file}")
    return 0


def _train_overrides(args) -> dict:
    if args.config is None:
        return {}
    with open(args.config) as fh:
        return json.load(fh)


def _cmd_train(args) -> int:
    overrides = _train_overrides(args)
    policy_doc = overrides.pop("policy", {})
    imitation_steps = overrides.pop("imitation_steps", 300)
    regimes_doc = overrides.pop("regimes", [{}])
    mass = overrides.pop("mass", 1.0)
    train_cfg = cfgmod.load_train_config(overrides)

    demo_set = data.load_demoset(args.demos)
    demos = list(demo_set.demos)
    model, strategy = _system_for(demo_set, mass)
    if policy_doc.get("kind", "feedback") == "feedback":
        policy = pol.make_feedback_policy(demo_set.state_dim, demo_set.command_dim,
                                          strategy=strategy,
                                          n_basis=policy_doc.get("n_basis", 30))
    else:
        policy = pol.make_mlp_policy(demo_set.state_dim, demo_set.command_dim,
                                     strategy=strategy,
                                     widths=tuple(policy_doc.get("widths", (64, 64))))
    stream = RngStream(args.seed)
    params = policy.init_params(stream.child("init").generator())
    params = tr.imitation_init(demos, policy, params, steps=imitation_steps,
                               stream=stream.child("imitation"),
                               fit_covariance=False)
    members = tuple(dyn.apply_regime(model, dyn.PerturbationRegime(
        d.get("force_std", 0.0), d.get("init_pos_std", 0.0), d.get("id", str(i))))
        for i, d in enumerate(regimes_doc))
    q_data = dsc.fit_q(demos, train_cfg.q_family,
                       () if train_cfg.q_family == dsc.FACTORIZED else policy.task_maps,
                       strategy, k=train_cfg.gmm_components,
                       rng=stream.child("qdata").generator())
    init = _init_dist(demos)
    params, _, _, report = tr.train_policy(train_cfg, demos,
                                           dyn.DynamicsEnsemble(members), policy,
                                           params, q_data, init,
                                           stream.child("train"))
    args.out.mkdir(parents=True, exist_ok=True)
    tr.write_checkpoint(args.out / "checkpoint.json", params)
    with open(args.out / "train_report.json", "w") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
    print(f"trained {report.iterations} iterations -> {args.out}")
    return 0


def _cmd_refine(args) -> int:
    overrides = {}
    if args.config is not None:
        with open(args.config) as fh:
            overrides = json.load(fh)
    report = ex.run_experiment("refine-dynamics", seed=args.seed,
                               out_dir=args.out, threads=args.threads,
                               overrides=overrides)
    print(f"refinement BD {report.summary['bd_before']:.4f} -> "
          f"{report.summary['bd_after']:.4f}; report in {args.out}")
    return 0


def _cmd_rollout(args) -> int:
    demo_set = data.load_demoset(args.demos)
    demos = list(demo_set.demos)
    model, strategy = _system_for(demo_set)
    with open(args.checkpoint) as fh:
        doc = json.load(fh)
    params = tr.load_param_vector(doc["policy"])
    names = set(params.layout)
    if any(name.endswith(".w_mu") for name in names):
        policy = pol.make_mlp_policy(demo_set.state_dim, demo_set.command_dim,
                                     strategy=strategy)
    else:
        n_basis = params.view("h0.ffwd").shape[0]
        policy = pol.make_feedback_policy(demo_set.state_dim, demo_set.command_dim,
                                          strategy=strategy, n_basis=n_basis)
    horizon = args.horizon or demo_set.horizon
    plan = ro.RolloutPlan(horizon=horizon, samples=args.n)
    trajs = ro.rollout(model, policy, params, _init_dist(demos), plan,
                       RngStream(args.seed).child("rollout"))
    args.out.mkdir(parents=True, exist_ok=True)
    for i, traj in enumerate(trajs):
        data.trajectory_to_csv(traj, args.out / f"rollout_{i:03d}.csv")
    print(f"wrote {len(trajs)} rollouts to {args.out}")
    return 0


def _load_traj_set(path: Path, state_dim: int, dt: float):
    if path.is_dir():
        return [data.trajectory_from_csv(p, state_dim, dt)
                for p in sorted(path.glob("*.csv"))]
    return list(data.load_demoset(path).demos)


def _cmd_eval(args) -> int:
    demo_set = data.load_demoset(args.demos)
    demos = list(demo_set.demos)
    rollouts = _load_traj_set(args.rollouts, demo_set.state_dim, demo_set.dt)
    payload = {
        "mse_mean_traj": met.mse_mean_traj(demos, rollouts),
        "bd_per_t": met.bd_traj(demos, rollouts),
        "bd_final": met.bd_traj(demos, rollouts, mode="final"),
        "mae_closest": met.mae_closest(rollouts, demos),
    }
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "metrics.json", "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
    for key in sorted(payload):
        print(f"{key}: {payload[key]:.6g}")
    return 0


def _cmd_experiment(args) -> int:
    overrides = None
    if args.config is not None:
        overrides = cfgmod.load_experiment_overrides(args.config)
    report = ex.run_experiment(args.name, seed=args.seed, out_dir=args.out,
                               threads=args.threads, overrides=overrides)
    print(f"experiment {args.name} done in {report.runtime_s:.1f} s -> {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    stream = RngStream(args.seed)
    demos = list(data.synth_letters("N", 4, args.horizon, 0.05, 0.02,
                                    stream.child("data").generator()).demos)
    strategy = ts.ControlStrategy(ts.ACCELERATION)
    policy = pol.make_feedback_policy(4, 2, strategy=strategy, n_basis=args.basis)
    params = policy.init_params(stream.child("init").generator(),
                                gain0=2.0, vel_gain0=1.5, sigma0=0.4)
    model = dyn.make_model(dyn.DOUBLE_INTEGRATOR, demos[0].dt, 4, 2, noise_std=0.2)
    q_data = dsc.fit_q(demos, dsc.FACTORIZED, (), strategy)
    init = _init_dist(demos)
    bound0 = {n: ad.constant(params.view(n)) for n in params.layout}
    dyn_bound = {n: ad.constant(model.params.view(n)) for n in model.params.layout}
    warm = ro.rollout_graph(model, policy, bound0, dyn_bound, init, args.horizon,
                            args.samples, stream.child("warmup"))
    q_samples = dsc.fit_q(ro.graph_to_trajectories(warm), dsc.FACTORIZED, (),
                          strategy)

    def build(p):
        bound = p.bind()
        graph = ro.rollout_graph(model, policy, bound, dyn_bound, init,
                                 args.horizon, args.samples, stream.child("loss"))
        ll_qd = dsc.q_loglik_node(q_data, graph.states, graph.commands)
        ll_qs = dsc.q_loglik_node(q_samples, graph.states, graph.commands)
        return ad.mean(ad.softplus(ll_qs - ll_qd)), bound

    err = ad.grad_check(build, params, h=1e-5)
    print(f"max relative gradient error over {params.size} parameters: {err:.3e}")
    if err > 1e-4:
        raise NumericalError(f"gradient check failed: {err:.3e} > 1e-4")
    return 0


def main(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "synth": _cmd_synth,
            "fit-q": _cmd_fit_q,
            "train": _cmd_train,
            "refine": _cmd_refine,
            "rollout": _cmd_rollout,
            "eval": _cmd_eval,
            "experiment": _cmd_experiment,
            "gradcheck": _cmd_gradcheck,
            "defaults": lambda a: (print(cfgmod.dump_defaults()), 0)[1],
        }[args.command]
        return handler(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
