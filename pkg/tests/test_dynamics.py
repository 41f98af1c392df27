import numpy as np
import pytest

from gamp import autodiff as ad
from gamp import dynamics as dyn
from gamp.errors import ValidationError


def test_single_integrator_euler_sum():
    m = dyn.make_model(dyn.SINGLE_INTEGRATOR, dt=0.01, state_dim=1, command_dim=1)
    state = np.zeros(1)
    for _ in range(100):
        state = dyn.step(m, state, np.ones(1), np.zeros(1))
    assert state[0] == pytest.approx(1.0, abs=1e-12)


def test_double_integrator_equilibrium():
    m = dyn.make_model(dyn.DOUBLE_INTEGRATOR, dt=0.01, state_dim=4, command_dim=2)
    state = np.array([0.3, -0.2, 0.0, 0.0])
    for _ in range(50):
        state = dyn.step(m, state, np.zeros(2), np.zeros(2))
    np.testing.assert_array_equal(state, [0.3, -0.2, 0.0, 0.0])


def test_double_integrator_order_position_uses_old_velocity():
    m = dyn.make_model(dyn.DOUBLE_INTEGRATOR, dt=0.1, state_dim=2, command_dim=1)
    state = dyn.step(m, np.array([0.0, 1.0]), np.array([2.0]), np.zeros(1))
    np.testing.assert_allclose(state, [0.1, 1.2])


def test_zero_weight_residual_reduces_to_point_mass():
    m_res = dyn.make_model(dyn.POINT_MASS_RESIDUAL, dt=0.01, state_dim=4,
                           command_dim=2, mass=3.0)
    m_pm = dyn.make_model(dyn.DOUBLE_INTEGRATOR, dt=0.01, state_dim=4,
                          command_dim=2, mass=3.0)
    state = np.array([0.1, 0.2, 0.3, 0.4])
    u = np.array([1.0, -1.0])
    np.testing.assert_array_equal(dyn.step(m_res, state, u, np.zeros(2)),
                                  dyn.step(m_pm, state, u, np.zeros(2)))


def test_mass_scales_acceleration():
    m = dyn.make_model(dyn.DOUBLE_INTEGRATOR, dt=0.01, state_dim=2, command_dim=1,
                       mass=2.0)
    state = dyn.step(m, np.zeros(2), np.array([4.0]), np.zeros(1))
    assert state[1] == pytest.approx(0.02)


def test_process_noise_reparametrized():
    m = dyn.make_model(dyn.DOUBLE_INTEGRATOR, dt=0.01, state_dim=2, command_dim=1,
                       noise_std=10.0)
    noise = np.array([0.5])
    state = dyn.step(m, np.zeros(2), np.zeros(1), noise)
    assert state[1] == pytest.approx(10.0 * 0.5 * 0.01)


def test_noise_free_rollout_matches_closed_form_bitwise():
    m = dyn.make_model(dyn.DOUBLE_INTEGRATOR, dt=0.02, state_dim=2, command_dim=1)
    rng = np.random.default_rng(0)
    us = rng.standard_normal((40, 1))
    state = np.array([0.1, -0.3])
    ref_pos, ref_vel = 0.1, -0.3
    for u in us:
        state = dyn.step(m, state, u, np.zeros(1))
        ref_pos = ref_pos + ref_vel * 0.02
        ref_vel = ref_vel + u[0] / 1.0 * 0.02
        assert state[0] == ref_pos
        assert state[1] == ref_vel


def test_contact_force_zero_at_boundary_with_zero_velocity():
    m = dyn.make_model(dyn.SPRING_DAMPER_CONTACT, dt=0.01, state_dim=4,
                       command_dim=2, mass=1.0, stiffness=1e4, damping=1e2)
    penetrations = [1e-9, 1e-6, 1e-4]
    prev_force = 0.0
    for pen in penetrations:
        state = np.array([0.0, -pen, 0.0, 0.0])
        nxt = dyn.step(m, state, np.zeros(2), np.zeros(2))
        force = nxt[3] / 0.01  # accel on the contact axis, mass 1
        assert force >= prev_force  # monotone in penetration
        assert force == pytest.approx(1e4 * pen, rel=1e-9)
        prev_force = force
    # above the plane: untouched
    nxt = dyn.step(m, np.array([0.0, 1e-9, 0.0, 0.0]), np.zeros(2), np.zeros(2))
    assert nxt[3] == 0.0


def test_regime_application():
    m = dyn.make_model(dyn.DOUBLE_INTEGRATOR, dt=0.01, state_dim=4, command_dim=2)
    same = dyn.apply_regime(m, dyn.PerturbationRegime(0.0, 0.0))
    np.testing.assert_array_equal(same.params.values, m.params.values)
    assert same.init_pos_noise_std == 0.0

    noisy = dyn.apply_regime(m, dyn.PerturbationRegime(force_std=10.0))
    np.testing.assert_array_equal(noisy.params.view("noise_std"), [10.0, 10.0])

    shifted = dyn.apply_regime(m, dyn.PerturbationRegime(init_pos_std=0.035))
    assert shifted.init_pos_noise_std == pytest.approx(0.035)


def test_residual_ensemble_std_targets():
    rng = np.random.default_rng(1)
    probes = rng.uniform(-1, 1, (200, 4))
    ens = dyn.init_residual_ensemble(5, dt=0.01, state_dim=4, command_dim=2,
                                     probe_states=probes, rng=rng, mass=3.0,
                                     target_std=5.0)
    for member in ens.members:
        ws = {name: member.params.view(name) for name in
              ("res_w1", "res_b1", "res_w2", "res_b2", "res_w3", "res_b3")}
        std = dyn._mlp_forward(ws, probes).std()
        assert 4.0 <= std <= 6.0


def test_residual_ensemble_zero_target_is_exact_zero():
    rng = np.random.default_rng(2)
    probes = rng.uniform(-1, 1, (50, 4))
    ens = dyn.init_residual_ensemble(2, dt=0.01, state_dim=4, command_dim=2,
                                     probe_states=probes, rng=rng, target_std=0.0)
    for member in ens.members:
        ws = {name: member.params.view(name) for name in
              ("res_w1", "res_b1", "res_w2", "res_b2", "res_w3", "res_b3")}
        np.testing.assert_array_equal(dyn._mlp_forward(ws, probes), 0.0)


def test_residual_ensemble_deterministic_given_seed():
    probes = np.random.default_rng(3).uniform(-1, 1, (50, 4))

    def build():
        return dyn.init_residual_ensemble(3, dt=0.01, state_dim=4, command_dim=2,
                                          probe_states=probes,
                                          rng=np.random.default_rng(42),
                                          target_std=5.0)

    a, b = build(), build()
    for ma, mb in zip(a.members, b.members):
        np.testing.assert_array_equal(ma.params.values, mb.params.values)


def test_ensemble_members_must_agree():
    a = dyn.make_model(dyn.DOUBLE_INTEGRATOR, dt=0.01, state_dim=4, command_dim=2)
    b = dyn.make_model(dyn.DOUBLE_INTEGRATOR, dt=0.02, state_dim=4, command_dim=2)
    with pytest.raises(ValidationError):
        dyn.DynamicsEnsemble((a, b))


def test_step_gradient_through_rollout():
    rng = np.random.default_rng(4)
    m = dyn.make_model(dyn.POINT_MASS_RESIDUAL, dt=0.05, state_dim=4, command_dim=2,
                       mass=2.0, noise_std=0.3)
    # random small residual weights so the gradient exercises the MLP
    params = m.params
    for name in ("res_w1", "res_w2", "res_w3"):
        params = params.updated(name, 0.2 * rng.standard_normal(params.view(name).shape))
    m = dyn.DynamicsModel(m.kind, params, m.dt, m.state_dim, m.command_dim,
                          widths=m.widths)
    noises = rng.standard_normal((20, 2))
    cmds = rng.standard_normal((20, 2))
    target = rng.standard_normal(4)

    def build(pp):
        bound = pp.bind()
        state = ad.constant(np.array([0.1, -0.1, 0.0, 0.0]))
        for t in range(20):
            state = dyn.step_node(m, bound, state, ad.constant(cmds[t]), noises[t])
        diff = state - ad.constant(target)
        return ad.sum_(ad.mul(diff, diff)), bound

    assert ad.grad_check(build, m.params, h=1e-6) <= 1e-4


def test_contact_rollout_gradient_away_from_surface():
    rng = np.random.default_rng(5)
    m = dyn.make_model(dyn.SPRING_DAMPER_CONTACT, dt=0.01, state_dim=4,
                       command_dim=2, mass=1.0, stiffness=100.0, damping=5.0,
                       contact_height=-0.5)
    noises = np.zeros((10, 2))
    cmds = 0.5 * rng.standard_normal((10, 2))

    def build(pp):
        bound = pp.bind()
        state = ad.constant(np.array([0.0, -0.8, 0.0, 0.0]))  # well below the plane
        for t in range(10):
            state = dyn.step_node(m, bound, state, ad.constant(cmds[t]), noises[t])
        return ad.sum_(ad.mul(state, state)), bound

    assert ad.grad_check(build, m.params, h=1e-6) <= 1e-4
