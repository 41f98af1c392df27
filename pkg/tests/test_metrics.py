import numpy as np
import pytest

from gamp import metrics as met
from gamp.errors import ValidationError
from gamp.gaussians import Gaussian, bhattacharyya, gauss_mle, gauss_sample
from gamp.rollout import Trajectory


def make_set(rng, n=6, horizon=15, d=2, shift=0.0):
    out = []
    for _ in range(n):
        states = rng.standard_normal((horizon, d)) * 0.3 + shift
        out.append(Trajectory(0.01, states, np.zeros((horizon, 1))))
    return out


def test_mse_identical_sets_zero():
    rng = np.random.default_rng(0)
    demos = make_set(rng)
    assert met.mse_mean_traj(demos, demos) == 0.0


def test_mse_constant_shift():
    rng = np.random.default_rng(1)
    demos = make_set(rng)
    shifted = [Trajectory(t.dt, t.states + 0.5, t.commands) for t in demos]
    assert met.mse_mean_traj(demos, shifted) == pytest.approx(0.25, rel=1e-12)


def test_mse_matches_hand_average():
    rng = np.random.default_rng(2)
    demos = make_set(rng, n=4)
    samples = make_set(rng, n=7)
    d_mean = np.mean([t.states for t in demos], axis=0)
    s_mean = np.mean([t.states for t in samples], axis=0)
    ref = np.mean((d_mean - s_mean) ** 2)
    assert met.mse_mean_traj(demos, samples) == pytest.approx(ref, rel=1e-12)


def test_bd_same_set_zero():
    rng = np.random.default_rng(3)
    demos = make_set(rng)
    assert met.bd_traj(demos, demos) == pytest.approx(0.0, abs=1e-10)


def test_bd_known_clouds_matches_closed_form():
    rng = np.random.default_rng(4)
    g1 = Gaussian(np.zeros(2), np.diag([0.2, 0.4]))
    g2 = Gaussian(np.array([1.0, 0.0]), np.diag([0.3, 0.3]))
    horizon = 3
    n = 4000
    set1 = [Trajectory(0.01, np.tile(s, (horizon, 1)), np.zeros((horizon, 1)))
            for s in gauss_sample(g1, rng.standard_normal((n, 2)))]
    set2 = [Trajectory(0.01, np.tile(s, (horizon, 1)), np.zeros((horizon, 1)))
            for s in gauss_sample(g2, rng.standard_normal((n, 2)))]
    ref = bhattacharyya(g1, g2)
    assert met.bd_traj(set1, set2) == pytest.approx(ref, rel=0.05)


def test_bd_final_mode_reduces_to_endpoint_fit():
    rng = np.random.default_rng(5)
    demos = make_set(rng)
    samples = make_set(rng, shift=0.3)
    ref = bhattacharyya(gauss_mle(np.stack([t.states[-1] for t in demos])),
                        gauss_mle(np.stack([t.states[-1] for t in samples])))
    assert met.bd_traj(demos, samples, mode="final") == pytest.approx(ref, rel=1e-12)


def test_bd_symmetric():
    rng = np.random.default_rng(6)
    a = make_set(rng)
    b = make_set(rng, shift=0.2)
    assert met.bd_traj(a, b) == met.bd_traj(b, a)


def test_mae_identical_zero_and_shift():
    rng = np.random.default_rng(7)
    demos = make_set(rng, n=5)
    assert met.mae_closest(demos, demos) == 0.0
    roll = [Trajectory(demos[2].dt, demos[2].states + 0.01, demos[2].commands)]
    assert met.mae_closest(roll + [demos[0]], demos) == pytest.approx(0.005, rel=1e-9)


def test_mae_matches_bruteforce():
    rng = np.random.default_rng(8)
    demos = make_set(rng, n=4)
    rollouts = make_set(rng, n=3, shift=0.1)
    vals = []
    for r in rollouts:
        best = min(np.mean(np.abs(r.states - d.states)) for d in demos)
        vals.append(best)
    assert met.mae_closest(rollouts, demos) == pytest.approx(np.mean(vals), rel=1e-12)


def test_mae_not_symmetric_documented():
    rng = np.random.default_rng(9)
    demos = make_set(rng, n=4)
    rollouts = make_set(rng, n=2, shift=0.4)
    assert met.mae_closest(rollouts, demos) != met.mae_closest(demos, rollouts)


def test_divergence_exact_endpoint():
    rng = np.random.default_rng(10)
    demos = make_set(rng, n=4)
    final = np.stack([t.states[-1] for t in demos]).mean(axis=0)
    rollouts = []
    for _ in range(5):
        states = rng.standard_normal((15, 2))
        states[-1] = final
        rollouts.append(Trajectory(0.01, states, np.zeros((15, 1))))
    stats = met.divergence_stats(rollouts, demos)
    assert stats.mean_final_dist == 0.0
    assert stats.final_state_std == 0.0
    assert stats.outliers == ()


def test_divergence_std_matches_sampling():
    rng = np.random.default_rng(11)
    demos = make_set(rng, n=4)
    final = np.stack([t.states[-1] for t in demos]).mean(axis=0)
    sigma = 0.07
    rollouts = []
    for _ in range(4000):
        states = np.zeros((3, 2))
        states[-1] = final + sigma * rng.standard_normal(2)
        rollouts.append(Trajectory(0.01, states, np.zeros((3, 1))))
    stats = met.divergence_stats(rollouts, demos)
    assert stats.final_state_std == pytest.approx(sigma, rel=0.05)


def test_divergence_outlier_flagged():
    rng = np.random.default_rng(12)
    demos = make_set(rng, n=4)
    rollouts = make_set(rng, n=3)
    bad = np.zeros((15, 2))
    bad[-1] = [1e6, 0.0]
    rollouts.append(Trajectory(0.01, bad, np.zeros((15, 1))))
    stats = met.divergence_stats(rollouts, demos, scale=1.0)
    assert 3 in stats.outliers
    assert stats.mean_final_dist > 1e5


def test_length_mismatch_rejected():
    rng = np.random.default_rng(13)
    demos = make_set(rng, horizon=15)
    samples = make_set(rng, horizon=20)
    with pytest.raises(ValidationError):
        met.mse_mean_traj(demos, samples)
    with pytest.raises(ValidationError):
        met.mae_closest(samples, demos)
