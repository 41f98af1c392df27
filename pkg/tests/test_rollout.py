import numpy as np
import pytest
from scipy.stats import chisquare

from gamp import autodiff as ad
from gamp import dynamics as dyn
from gamp import policy as pol
from gamp import rollout as ro
from gamp import taskspace as ts
from gamp.datasets import synth_letters
from gamp.errors import ValidationError
from gamp.rng import RngStream


def feedforward_policy(command_dim=2, n_basis=4, ffwd=0.5):
    strategy = ts.ControlStrategy(ts.ACCELERATION)
    policy = pol.make_feedback_policy(2 * command_dim, command_dim,
                                      strategy=strategy, n_basis=n_basis)
    params = policy.init_params(np.random.default_rng(0))
    params = params.updated("h0.gain_logits", np.full((n_basis, command_dim), -60.0))
    params = params.updated("h0.vel_gain_logits", np.full((n_basis, command_dim), -60.0))
    params = params.updated("h0.ffwd", np.full((n_basis, command_dim), ffwd))
    params = params.updated("h0.cov_logs", _tiny_cov_logs(n_basis, command_dim))
    return policy, params


def _tiny_cov_logs(n_basis, d):
    v = d * (d + 1) // 2
    logs = np.full((n_basis, v), 0.0)
    diag = np.nonzero(np.equal(*np.tril_indices(d)))[0]
    out = np.zeros((n_basis, v))
    out[:, diag] = -60.0
    return out


def test_noiseless_feedforward_matches_euler_recursion():
    policy, params = feedforward_policy(command_dim=1, ffwd=1.0)
    model = dyn.make_model(dyn.DOUBLE_INTEGRATOR, dt=0.01, state_dim=2, command_dim=1)
    init = dyn.InitStateDist(np.zeros(2), np.zeros((2, 2)))
    plan = ro.RolloutPlan(horizon=100, samples=3)
    trajs = ro.rollout(model, policy, params, init, plan, RngStream(7))
    # deterministic Euler with u = 1: v_t = t*dt, x_t = sum v
    pos, vel = 0.0, 0.0
    for t in range(100):
        for traj in trajs:
            # policy covariance is floored at 1e-6, so tolerance is ~1e-3 noise
            assert traj.states[t, 0] == pytest.approx(pos, abs=2e-3)
            assert traj.states[t, 1] == pytest.approx(vel, abs=2e-3)
        pos += vel * 0.01
        vel += 1.0 * 0.01


def test_same_seed_bit_identical():
    policy, params = feedforward_policy()
    model = dyn.make_model(dyn.DOUBLE_INTEGRATOR, dt=0.01, state_dim=4,
                           command_dim=2, noise_std=1.0)
    init = dyn.InitStateDist(np.zeros(4), 0.01 * np.eye(4))
    plan = ro.RolloutPlan(horizon=30, samples=4)
    a = ro.rollout(model, policy, params, init, plan, RngStream(3))
    b = ro.rollout(model, policy, params, init, plan, RngStream(3))
    for ta, tb in zip(a, b):
        np.testing.assert_array_equal(ta.states, tb.states)
        np.testing.assert_array_equal(ta.commands, tb.commands)


def test_distinct_streams_differ():
    policy, params = feedforward_policy()
    model = dyn.make_model(dyn.DOUBLE_INTEGRATOR, dt=0.01, state_dim=4,
                           command_dim=2, noise_std=1.0)
    init = dyn.InitStateDist(np.zeros(4), 0.01 * np.eye(4))
    plan = ro.RolloutPlan(horizon=10, samples=1)
    a = ro.rollout(model, policy, params, init, plan, RngStream(3))
    b = ro.rollout(model, policy, params, init, plan, RngStream(4))
    assert not np.array_equal(a[0].states, b[0].states)


def test_rollout_batch_reduces_and_isolates():
    policy, params = feedforward_policy()
    rng = np.random.default_rng(1)
    probes = rng.uniform(-0.5, 0.5, (100, 4))
    ens = dyn.init_residual_ensemble(3, dt=0.01, state_dim=4, command_dim=2,
                                     probe_states=probes, rng=rng, target_std=3.0)
    init = dyn.InitStateDist(np.zeros(4), 1e-4 * np.eye(4))
    plan = ro.RolloutPlan(horizon=15, samples=2)
    batch = ro.rollout_batch(ens, policy, params, init, plan, RngStream(11))
    assert len(batch) == 3 and all(len(b) == 2 for b in batch)
    # identical noise substreams, different members: trajectories differ
    assert not np.array_equal(batch[0][0].states, batch[1][0].states)
    # single-member batch equals plain rollout with the member substream
    single = ro.rollout(ens.members[0], policy, params, init, plan,
                        RngStream(11).child("member", 0))
    np.testing.assert_array_equal(batch[0][0].states, single[0].states)
    # members evolve independently: a member's trajectory depends only on
    # (member, slot substream), never on which other members are present
    perm = dyn.DynamicsEnsemble((ens.members[2], ens.members[0], ens.members[1]))
    batch_perm = ro.rollout_batch(perm, policy, params, init, plan, RngStream(11))
    alone = ro.rollout(ens.members[0], policy, params, init, plan,
                       RngStream(11).child("member", 1))
    np.testing.assert_array_equal(batch_perm[1][0].states, alone[0].states)


def test_rollout_gradient_matches_fd():
    strategy = ts.ControlStrategy(ts.ACCELERATION)
    policy = pol.make_feedback_policy(4, 2, strategy=strategy, n_basis=3)
    params = policy.init_params(np.random.default_rng(2), gain0=2.0, vel_gain0=1.0,
                                sigma0=0.5)
    model = dyn.make_model(dyn.DOUBLE_INTEGRATOR, dt=0.05, state_dim=4,
                           command_dim=2, noise_std=0.2)
    init = dyn.InitStateDist(np.array([0.2, -0.1, 0.0, 0.0]), 0.01 * np.eye(4))
    target = np.array([0.5, 0.5, 0.0, 0.0])
    stream = RngStream(5)

    def build(pp):
        bound = pp.bind()
        dyn_bound = {n: ad.constant(model.params.view(n)) for n in model.params.layout}
        graph = ro.rollout_graph(model, policy, bound, dyn_bound, init,
                                 horizon=20, n=3, stream=stream)
        diff = graph.final_state - ad.constant(target)
        return ad.mean(ad.sum_(ad.mul(diff, diff), axis=-1)), bound

    assert ad.grad_check(build, params, h=1e-5) <= 1e-4


def test_gradient_sensitive_to_both_noise_sources():
    strategy = ts.ControlStrategy(ts.ACCELERATION)
    policy = pol.make_feedback_policy(2, 1, strategy=strategy, n_basis=3)
    params = policy.init_params(np.random.default_rng(3), sigma0=0.5)
    init = dyn.InitStateDist(np.zeros(2), np.zeros((2, 2)))
    target = np.array([0.3, 0.0])

    def grad_for(noise_std, stream_seed):
        model = dyn.make_model(dyn.DOUBLE_INTEGRATOR, dt=0.05, state_dim=2,
                               command_dim=1, noise_std=noise_std)
        bound = params.bind()
        dyn_bound = {n: ad.constant(model.params.view(n)) for n in model.params.layout}
        graph = ro.rollout_graph(model, policy, bound, dyn_bound, init,
                                 horizon=10, n=2, stream=RngStream(stream_seed))
        diff = graph.final_state - ad.constant(target)
        loss = ad.mean(ad.sum_(ad.mul(diff, diff), axis=-1))
        return ad.flat_grad(loss, params, bound)

    g_noisy = grad_for(0.5, 9)
    g_quiet = grad_for(0.0, 9)
    assert np.all(np.isfinite(g_noisy)) and np.all(np.isfinite(g_quiet))
    assert not np.allclose(g_noisy, g_quiet)


def test_linear_system_covariance_matches_lyapunov():
    # x' = x + dt*u, u ~ N(-k x, sigma^2): P' = (1-dt k)^2 P + dt^2 sigma^2
    k, sigma, dt, horizon = 2.0, 0.4, 0.05, 10
    strategy = ts.ControlStrategy(ts.VELOCITY)
    policy = pol.make_feedback_policy(1, 1, strategy=strategy, n_basis=2)
    params = policy.init_params(np.random.default_rng(4))
    params = params.updated("h0.gain_logits", np.full((2, 1), np.log(k)))
    params = params.updated("h0.ffwd", np.zeros((2, 1)))
    params = params.updated("h0.cov_logs", np.full((2, 1), 2 * np.log(sigma)))
    model = dyn.make_model(dyn.SINGLE_INTEGRATOR, dt=dt, state_dim=1, command_dim=1)
    p0 = 0.09
    init = dyn.InitStateDist(np.zeros(1), p0 * np.eye(1))
    plan = ro.RolloutPlan(horizon=horizon, samples=10_000)
    trajs = ro.rollout(model, policy, params, init, plan, RngStream(21))
    states = np.stack([t.states[:, 0] for t in trajs])  # (n, T)
    p = p0
    sigma_eff2 = sigma ** 2 + 1e-6  # covariance floor adds to the head variance
    for t in range(horizon):
        emp = states[:, t].var()
        assert emp == pytest.approx(p, rel=0.05)
        p = (1 - dt * k) ** 2 * p + dt ** 2 * sigma_eff2


def test_make_chunks_full_length_no_noise_returns_demos():
    demos = synth_letters("C", n_demos=4, horizon=30,
                          rng=np.random.default_rng(5)).demos
    batch = ro.make_chunks(list(demos), length=30, count=8, noise_std=0.0,
                           rng=np.random.default_rng(6))
    assert np.all(batch.offsets == 0)
    for i in range(8):
        np.testing.assert_array_equal(batch.starts[i], demos[batch.demo_idx[i]].states[0])
        np.testing.assert_array_equal(batch.refs[i], demos[batch.demo_idx[i]].states)


def test_make_chunks_uniform_offsets():
    demos = synth_letters("C", n_demos=3, horizon=40,
                          rng=np.random.default_rng(7)).demos
    batch = ro.make_chunks(list(demos), length=10, count=10_000, noise_std=0.0,
                           rng=np.random.default_rng(8))
    n_slots = 40 - 10 + 1
    counts = np.bincount(batch.offsets, minlength=n_slots)
    assert chisquare(counts).pvalue > 0.01


def test_make_chunks_noise_magnitude():
    demos = synth_letters("C", n_demos=3, horizon=40,
                          rng=np.random.default_rng(9)).demos
    noisy = ro.make_chunks(list(demos), length=10, count=20_000, noise_std=0.01,
                           rng=np.random.default_rng(10))
    clean = ro.make_chunks(list(demos), length=10, count=20_000, noise_std=0.0,
                           rng=np.random.default_rng(10))
    dev = np.linalg.norm(noisy.starts - clean.starts, axis=1)
    expected = 0.01 * np.sqrt(demos[0].state_dim)
    rms = np.sqrt(np.mean(dev ** 2))
    assert rms == pytest.approx(expected, rel=0.05)


def test_chunk_longer_than_demo_rejected():
    demos = synth_letters("C", n_demos=3, horizon=20,
                          rng=np.random.default_rng(11)).demos
    with pytest.raises(ValidationError):
        ro.make_chunks(list(demos), length=21, count=1, noise_std=0.0,
                       rng=np.random.default_rng(12))


def test_observation_model_identity_matches_default():
    policy, params = feedforward_policy()
    model = dyn.make_model(dyn.DOUBLE_INTEGRATOR, dt=0.01, state_dim=4, command_dim=2)
    init = dyn.InitStateDist(np.zeros(4), 0.01 * np.eye(4))
    plan = ro.RolloutPlan(horizon=10, samples=2)
    default = ro.rollout(model, policy, params, init, plan, RngStream(13))
    explicit = ro.rollout(model, policy, params, init, plan, RngStream(13),
                          obs=ro.ObservationModel())
    np.testing.assert_array_equal(default[0].states, explicit[0].states)


def test_observation_model_linear_gaussian_smoke():
    policy, params = feedforward_policy()
    model = dyn.make_model(dyn.DOUBLE_INTEGRATOR, dt=0.01, state_dim=4, command_dim=2)
    init = dyn.InitStateDist(np.zeros(4), 0.01 * np.eye(4))
    plan = ro.RolloutPlan(horizon=10, samples=2)
    obs = ro.ObservationModel("linear_gaussian", matrix=np.eye(4),
                              noise_cov=1e-4 * np.eye(4))
    trajs = ro.rollout(model, policy, params, init, plan, RngStream(14), obs=obs)
    assert trajs[0].states.shape == (10, 4)
    assert np.all(np.isfinite(trajs[0].states))
