import numpy as np
import pytest

from gamp import autodiff as ad
from gamp import policy as pol
from gamp import taskspace as ts
from gamp.gaussians import Gaussian, LinearExpert, gauss_logpdf, gauss_product


# ------------------------------------------------------------------ basis

def test_rbf_features_near_one_hot_for_tiny_bandwidth():
    basis = pol.RbfBasis(np.linspace(0, 1, 5), 1e-3)
    w = basis.features(0.5)
    assert w[2] == pytest.approx(1.0, abs=1e-10)


def test_rbf_features_sum_to_one():
    basis = pol.RbfBasis.uniform(10, 1.5)
    for t in np.linspace(0, 1, 33):
        assert basis.features(t).sum() == pytest.approx(1.0, abs=1e-12)


def test_rbf_features_match_direct_formula():
    basis = pol.RbfBasis.uniform(10, bandwidth_scale=0.9)
    t = 0.5
    spacing = 1.0 / 9
    raw = np.exp(-0.5 * ((t - basis.centers) / (0.9 * spacing)) ** 2)
    np.testing.assert_allclose(basis.features(t), raw / raw.sum(), atol=1e-14)


# ------------------------------------------------------------------ heads

def make_simple_feedback(state_dim=2, command_dim=1, n_basis=5):
    strategy = ts.ControlStrategy(ts.ACCELERATION)
    policy = pol.make_feedback_policy(state_dim, command_dim, n_basis=n_basis,
                                      strategy=strategy)
    rng = np.random.default_rng(0)
    params = policy.init_params(rng, gain0=2.0, vel_gain0=1.0, sigma0=0.4)
    return policy, params


def test_feedback_zero_gain_head_is_pure_feedforward():
    policy, params = make_simple_feedback()
    params = params.updated("h0.gain_logits", np.full((5, 1), -40.0))
    params = params.updated("h0.vel_gain_logits", np.full((5, 1), -40.0))
    params = params.updated("h0.ffwd", np.full((5, 1), 0.7))
    g = pol.head_eval(policy.heads[0], params, policy.task_maps[0],
                      policy.strategy, 0.3, np.array([5.0, -2.0]))
    assert g.mean[0] == pytest.approx(0.7, abs=1e-10)


def test_feedback_equilibrium_at_attractor():
    policy, params = make_simple_feedback()
    params = params.updated("h0.gain_logits", np.full((5, 1), np.log(2.0)))
    params = params.updated("h0.vel_gain_logits", np.full((5, 1), -40.0))
    params = params.updated("h0.ffwd", np.full((5, 1), 1.0))
    # mean = -K x + d = 0 at x = d / K
    g = pol.head_eval(policy.heads[0], params, policy.task_maps[0],
                      policy.strategy, 0.5, np.array([0.5, 0.0]))
    assert g.mean[0] == pytest.approx(0.0, abs=1e-10)


def test_mlp_zero_weights_gives_zero_mean_base_cov():
    strategy = ts.ControlStrategy(ts.VELOCITY)
    policy = pol.make_mlp_policy(2, 2, strategy=strategy, widths=(16, 16))
    rng = np.random.default_rng(1)
    params = policy.init_params(rng, sigma0=0.3)
    for name in params.layout:
        if name.endswith((".w_mu", ".b_mu", ".w_l")):
            params = params.updated(name, np.zeros(params.view(name).shape))
    g = pol.head_eval(policy.heads[0], params, policy.task_maps[0],
                      strategy, 0.0, np.array([0.4, 0.5]))
    np.testing.assert_allclose(g.mean, [0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(g.cov, 0.09 * np.eye(2), atol=1e-5)


def test_gains_positive_on_fine_grid():
    policy, params = make_simple_feedback()
    rng = np.random.default_rng(2)
    params = params.with_values(rng.standard_normal(params.size))
    tracks = pol.realized_gains(policy, params, np.linspace(0, 1, 200))[0]
    assert np.all(tracks["gain"] > 0)
    assert np.all(tracks["vel_gain"] > 0)


# ------------------------------------------------------------------ fusion

def test_single_identity_head_passthrough():
    policy, params = make_simple_feedback()
    xi = np.array([0.3, -0.1])
    fused = pol.pogp_eval(policy, params, 0.2, xi)
    head = pol.head_eval(policy.heads[0], params, policy.task_maps[0],
                         policy.strategy, 0.2, xi)
    np.testing.assert_allclose(fused.mean, head.mean, atol=1e-12)
    np.testing.assert_allclose(fused.cov, head.cov, atol=1e-12)


def test_two_identity_heads_midpoint_fusion():
    strategy = ts.ControlStrategy(ts.VELOCITY)
    maps = (ts.TaskMap.identity(1), ts.TaskMap.identity(1))
    policy = pol.make_mlp_policy(1, 1, task_maps=maps, strategy=strategy,
                                 widths=(8, 8))
    rng = np.random.default_rng(3)
    params = policy.init_params(rng, sigma0=1.0)
    for head in ("h0", "h1"):
        for suffix in (".w_mu", ".w_l"):
            params = params.updated(head + suffix,
                                    np.zeros(params.view(head + suffix).shape))
    params = params.updated("h0.b_mu", np.array([0.0]))
    params = params.updated("h1.b_mu", np.array([2.0]))
    fused = pol.pogp_eval(policy, params, 0.0, np.array([0.0]))
    assert fused.mean[0] == pytest.approx(1.0, abs=1e-6)
    assert fused.cov[0, 0] == pytest.approx(0.5, rel=1e-3)


def test_fusion_matches_probcore_product_with_affine_frame():
    ang = 0.7
    rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    maps = (ts.TaskMap.identity(2), ts.TaskMap.frame(rot, np.array([0.2, -0.1])))
    strategy = ts.ControlStrategy(ts.VELOCITY)
    policy = pol.make_mlp_policy(2, 2, task_maps=maps, strategy=strategy,
                                 widths=(12, 12))
    rng = np.random.default_rng(4)
    params = policy.init_params(rng, sigma0=0.5)
    params = params.with_values(params.values + 0.2 * rng.standard_normal(params.size))
    xi = rng.uniform(-0.5, 0.5, 2)
    fused = pol.pogp_eval(policy, params, 0.0, xi)

    experts = []
    for head, task_map in zip(policy.heads, maps):
        g = pol.head_eval(head, params, task_map, strategy, 0.0, xi)
        a = ts.command_matrix(task_map, strategy, xi)
        experts.append(LinearExpert(a, np.zeros(2), g))
    ref = gauss_product(experts)
    np.testing.assert_allclose(fused.mean, ref.mean, atol=1e-8)
    np.testing.assert_allclose(fused.cov, ref.cov, atol=1e-8)


def test_fusion_matches_grid_normalized_product_2d():
    ang = -0.4
    rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    maps = (ts.TaskMap.identity(2), ts.TaskMap.frame(rot, np.zeros(2)))
    strategy = ts.ControlStrategy(ts.VELOCITY)
    policy = pol.make_mlp_policy(2, 2, task_maps=maps, strategy=strategy,
                                 widths=(8, 8))
    rng = np.random.default_rng(5)
    params = policy.init_params(rng, sigma0=0.6)
    params = params.with_values(params.values + 0.1 * rng.standard_normal(params.size))
    xi = np.array([0.2, -0.3])
    fused = pol.pogp_eval(policy, params, 0.0, xi)

    heads = [pol.head_eval(h, params, m, strategy, 0.0, xi)
             for h, m in zip(policy.heads, maps)]
    span = 5.0
    n = 301
    us = np.linspace(fused.mean[0] - span, fused.mean[0] + span, n)
    vs = np.linspace(fused.mean[1] - span, fused.mean[1] + span, n)
    gu, gv = np.meshgrid(us, vs, indexing="ij")
    pts = np.stack([gu.ravel(), gv.ravel()], axis=1)
    log_w = (gauss_logpdf(heads[0], pts)
             + gauss_logpdf(heads[1], pts @ rot.T))
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    mean = w @ pts
    diff = pts - mean
    cov = diff.T @ (diff * w[:, None])
    np.testing.assert_allclose(fused.mean, mean, atol=1e-4)
    np.testing.assert_allclose(fused.cov, cov, atol=1e-3)


def test_duplicated_head_keeps_mean_doubles_precision():
    strategy = ts.ControlStrategy(ts.VELOCITY)
    one = pol.make_mlp_policy(2, 2, strategy=strategy, widths=(8, 8))
    rng = np.random.default_rng(6)
    params_one = one.init_params(rng, sigma0=0.5)

    maps = (ts.TaskMap.identity(2), ts.TaskMap.identity(2))
    two = pol.PoGPolicy(maps, (one.heads[0], one.heads[0]), strategy, 2, 2)
    xi = np.array([0.1, 0.4])
    g1 = pol.pogp_eval(one, params_one, 0.0, xi)
    g2 = pol.pogp_eval(two, params_one, 0.0, xi)
    np.testing.assert_allclose(g2.mean, g1.mean, atol=1e-8)
    np.testing.assert_allclose(np.linalg.inv(g2.cov), 2 * np.linalg.inv(g1.cov),
                               rtol=1e-4)


def test_identical_heads_covariance_scales_inverse_p():
    strategy = ts.ControlStrategy(ts.VELOCITY)
    base = pol.make_mlp_policy(2, 2, strategy=strategy, widths=(8, 8))
    rng = np.random.default_rng(7)
    params = base.init_params(rng, sigma0=0.5)
    xi = np.array([-0.2, 0.3])
    g1 = pol.pogp_eval(base, params, 0.0, xi)
    for p_count in (2, 3):
        maps = tuple(ts.TaskMap.identity(2) for _ in range(p_count))
        multi = pol.PoGPolicy(maps, tuple(base.heads[0] for _ in range(p_count)),
                              strategy, 2, 2)
        gp = pol.pogp_eval(multi, params, 0.0, xi)
        np.testing.assert_allclose(gp.mean, g1.mean, atol=1e-8)
        np.testing.assert_allclose(gp.cov, g1.cov / p_count, rtol=1e-4)


# ------------------------------------------------------------------ logpdf

def test_policy_logpdf_maximal_at_fused_mean():
    policy, params = make_simple_feedback()
    xi = np.array([0.2, 0.1])
    fused = pol.pogp_eval(policy, params, 0.4, xi)
    at_mean = pol.policy_logpdf(policy, params, 0.4, xi, fused.mean)
    rng = np.random.default_rng(8)
    for _ in range(10):
        u = fused.mean + 0.3 * rng.standard_normal(1)
        assert pol.policy_logpdf(policy, params, 0.4, xi, u) <= at_mean + 1e-12


def test_policy_logpdf_single_head_equals_gauss_logpdf():
    policy, params = make_simple_feedback()
    xi = np.array([0.2, 0.1])
    u = np.array([0.6])
    head = pol.head_eval(policy.heads[0], params, policy.task_maps[0],
                         policy.strategy, 0.4, xi)
    assert pol.policy_logpdf(policy, params, 0.4, xi, u) == pytest.approx(
        gauss_logpdf(head, u), rel=1e-12)


def test_policy_logpdf_matches_fused_gaussian():
    ang = 0.3
    rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    maps = (ts.TaskMap.identity(2), ts.TaskMap.frame(rot, np.zeros(2)))
    policy = pol.make_mlp_policy(2, 2, task_maps=maps,
                                 strategy=ts.ControlStrategy(ts.VELOCITY),
                                 widths=(8, 8))
    rng = np.random.default_rng(9)
    params = policy.init_params(rng, sigma0=0.5)
    xi = np.array([0.1, 0.2])
    u = np.array([0.3, -0.2])
    fused = pol.pogp_eval(policy, params, 0.0, xi)
    assert pol.policy_logpdf(policy, params, 0.0, xi, u) == pytest.approx(
        gauss_logpdf(fused, u), rel=1e-10)


# ------------------------------------------------------------------ gradients

def test_feedback_policy_eval_grad_check():
    policy, params = make_simple_feedback(n_basis=4)
    xi = np.array([0.3, -0.2])
    u = np.array([0.5])

    def build(pp):
        bound = pp.bind()
        pre = policy.precompute(bound, np.array([0.37]))
        ll = pol.policy_logpdf_node(policy, bound, pre, 0,
                                    ad.constant(xi), ad.constant(u))
        return ad.sum_(ll), bound

    assert ad.grad_check(build, params, h=1e-6) <= 1e-4


def test_mlp_pogp_eval_grad_check():
    ang = 0.5
    rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    maps = (ts.TaskMap.identity(2), ts.TaskMap.frame(rot, np.array([0.1, 0.1])))
    policy = pol.make_mlp_policy(2, 2, task_maps=maps,
                                 strategy=ts.ControlStrategy(ts.VELOCITY),
                                 widths=(6, 6))
    rng = np.random.default_rng(10)
    params = policy.init_params(rng, sigma0=0.5)
    xi = np.array([[0.3, -0.2], [0.1, 0.4]])
    u = np.array([[0.5, 0.0], [-0.1, 0.2]])

    def build(pp):
        bound = pp.bind()
        pre = policy.precompute(bound, np.zeros(1))
        ll = pol.policy_logpdf_node(policy, bound, pre, 0,
                                    ad.constant(xi), ad.constant(u))
        return ad.sum_(ll), bound

    assert ad.grad_check(build, params, h=1e-6) <= 1e-4
