"""Comparison methods: basis-weight trajectory distributions with
conditioning (a lightweight ProMP), Gaussian mixture regression, and a
finite-horizon linear quadratic tracker.

The tracker regenerates continuous motion from a per-timestep state
distribution by weighting tracking errors with the distribution's
precisions.  The basis-weight model is coupled to the same tracker rather
than to its original stochastic feedback derivation; that approximation is
deliberate and documented in the README.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dynamics import DynamicsModel, step
from .errors import NumericalError, ValidationError
from .gaussians import (COV_FLOOR, Gaussian, GaussianMixture, floor_spd,
                        gauss_condition, gauss_logpdf, gauss_mle)
from .policy import RbfBasis
from .rng import RngStream
from .rollout import Trajectory


# ------------------------------------------------------------------ ProMP

@dataclass(frozen=True)
class PrompModel:
    """Gaussian over stacked per-dimension basis weights."""

    basis: RbfBasis
    dim: int
    weights: Gaussian           # over (dim * n_basis,) stacked weights
    duration: float             # seconds covered by normalized time [0, 1]
    obs_noise: float = 1e-4

    @property
    def n_basis(self) -> int:
        return self.basis.count


def _ridge_weights(basis: RbfBasis, positions: np.ndarray, ridge: float) -> np.ndarray:
    horizon = positions.shape[0]
    phi = basis.features(np.linspace(0.0, 1.0, horizon))
    gram = phi.T @ phi + ridge * np.eye(basis.count)
    return np.linalg.solve(gram, phi.T @ positions)  # (n_basis, dim)


def promp_fit(demos: Sequence[Trajectory], n_basis: int = 30,
              bandwidth_scale: float = 1.5, ridge: float = 1e-6,
              pos_dims: Optional[int] = None) -> PrompModel:
    """Ridge-regress per-demo weights, then a Gaussian over the weights."""
    if len(demos) < 2:
        raise ValidationError("the weight distribution needs at least two demos")
    basis = RbfBasis.uniform(n_basis, bandwidth_scale)
    dim = pos_dims if pos_dims is not None else demos[0].state_dim
    ws = []
    for demo in demos:
        w = _ridge_weights(basis, demo.states[:, :dim], ridge)
        ws.append(w.T.ravel())  # dim-major stacking
    duration = (demos[0].horizon - 1) * demos[0].dt
    return PrompModel(basis, dim, gauss_mle(np.stack(ws)), duration)


def _observation_row(m: PrompModel, t: float, derivative: bool = False) -> np.ndarray:
    phi = m.basis.features_dt(t) / m.duration if derivative else m.basis.features(t)
    h = np.zeros((m.dim, m.dim * m.n_basis))
    for d in range(m.dim):
        h[d, d * m.n_basis : (d + 1) * m.n_basis] = phi
    return h


def promp_condition(m: PrompModel, t: float, value, noise: float) -> PrompModel:
    """Condition the weight distribution on observing the position at t."""
    h = _observation_row(m, t)
    value = np.asarray(value, dtype=float)
    s = h @ m.weights.cov @ h.T + noise * np.eye(m.dim)
    gain = np.linalg.solve(s, h @ m.weights.cov).T
    mean = m.weights.mean + gain @ (value - h @ m.weights.mean)
    cov = m.weights.cov - gain @ h @ m.weights.cov
    return PrompModel(m.basis, m.dim, Gaussian(mean, 0.5 * (cov + cov.T)),
                      m.duration, m.obs_noise)


def promp_marginal(m: PrompModel, t: float, with_velocity: bool = True) -> Gaussian:
    """State marginal at normalized time t: positions, and velocities from
    the basis derivative."""
    h = _observation_row(m, t)
    if with_velocity:
        h = np.concatenate([h, _observation_row(m, t, derivative=True)], axis=0)
    return Gaussian(h @ m.weights.mean, h @ m.weights.cov @ h.T)


def promp_mean_trajectory(m: PrompModel, horizon: int) -> np.ndarray:
    phi = m.basis.features(np.linspace(0.0, 1.0, horizon))
    w = m.weights.mean.reshape(m.dim, m.n_basis)
    return phi @ w.T


# ------------------------------------------------------------------ GMR

def gmr(joint: GaussianMixture, t: float) -> Gaussian:
    """Condition a joint mixture over (t, state) on time; moment-matched."""
    log_resp = np.array([
        np.log(w) + gauss_logpdf(Gaussian(c.mean[:1], c.cov[:1, :1]), np.array([t]))
        for w, c in zip(joint.weights, joint.components)])
    top = log_resp.max()
    if not np.isfinite(top):
        raise NumericalError(f"no mixture component takes responsibility at t={t}")
    resp = np.exp(log_resp - top)
    resp /= resp.sum()
    conds = [gauss_condition(c, [0], [t]) for c in joint.components]
    mean = sum(r * c.mean for r, c in zip(resp, conds))
    second = sum(r * (c.cov + np.outer(c.mean, c.mean))
                 for r, c in zip(resp, conds))
    return Gaussian(mean, floor_spd(second - np.outer(mean, mean)))


def fit_time_state_gmm(demos: Sequence[Trajectory], k: int, steps: int = 30,
                       rng=None) -> GaussianMixture:
    """Joint mixture over (normalized time, state) pooled across demos."""
    from .gaussians import em_fit_gmm

    pts = []
    for demo in demos:
        ts_norm = np.linspace(0.0, 1.0, demo.horizon)[:, None]
        pts.append(np.concatenate([ts_norm, demo.states], axis=1))
    return em_fit_gmm(np.concatenate(pts), k, steps=steps, rng=rng)


# ------------------------------------------------------------------ LQT

@dataclass(frozen=True)
class LqtSolution:
    gains: np.ndarray        # (T-1, m, n)
    ffwd: np.ndarray         # (T-1, m)
    cost_to_go: np.ndarray   # (T, n, n)


def lqt_solve(a: np.ndarray, b: np.ndarray, targets: np.ndarray,
              weights: np.ndarray, r: np.ndarray) -> LqtSolution:
    """Backward Riccati recursion for tracking per-timestep targets.

    Minimizes sum_t (x_t - mu_t)' Q_t (x_t - mu_t) + sum_t u_t' R u_t under
    x_{t+1} = A x_t + B u_t; controls are u_t = -K_t x_t + k_t.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    weights = np.asarray(weights, dtype=float)
    r = np.atleast_2d(np.asarray(r, dtype=float))
    horizon, n = targets.shape
    m = b.shape[1]
    if np.any(np.linalg.eigvalsh(0.5 * (r + r.T)) <= 0):
        raise NumericalError("control penalty R must be positive definite")
    if weights.shape != (horizon, n, n):
        raise ValidationError("one tracking weight matrix per timestep")

    gains = np.zeros((horizon - 1, m, n))
    ffwd = np.zeros((horizon - 1, m))
    cost_to_go = np.zeros((horizon, n, n))
    p_mat = weights[-1].copy()
    p_vec = -weights[-1] @ targets[-1]
    cost_to_go[-1] = p_mat
    for t in range(horizon - 2, -1, -1):
        g = r + b.T @ p_mat @ b
        k_gain = np.linalg.solve(g, b.T @ p_mat @ a)
        k_ff = -np.linalg.solve(g, b.T @ p_vec)
        closed = a - b @ k_gain
        new_p = weights[t] + k_gain.T @ r @ k_gain + closed.T @ p_mat @ closed
        new_v = (-weights[t] @ targets[t] + closed.T @ (p_mat @ (b @ k_ff) + p_vec)
                 - k_gain.T @ r @ k_ff)
        p_mat = 0.5 * (new_p + new_p.T)
        p_vec = new_v
        eig_min = float(np.linalg.eigvalsh(p_mat).min())
        if eig_min < -1e-8 * max(1.0, float(np.abs(p_mat).max())):
            raise NumericalError(f"cost-to-go lost positive semidefiniteness at t={t}")
        gains[t] = k_gain
        ffwd[t] = k_ff
        cost_to_go[t] = p_mat
    return LqtSolution(gains, ffwd, cost_to_go)


def lqt_rollout(model: DynamicsModel, sol: LqtSolution, start_states: np.ndarray,
                stream: Optional[RngStream] = None) -> list:
    """Run the tracker through the (possibly stochastic) dynamics model."""
    starts = np.atleast_2d(np.asarray(start_states, dtype=float))
    n_samples = starts.shape[0]
    horizon = sol.gains.shape[0] + 1
    noise = (stream.generator().standard_normal((horizon, n_samples, model.command_dim))
             if stream is not None else np.zeros((horizon, n_samples, model.command_dim)))
    states = np.zeros((horizon, n_samples, model.state_dim))
    commands = np.zeros((horizon, n_samples, model.command_dim))
    x = starts.copy()
    for t in range(horizon):
        k_gain = sol.gains[min(t, horizon - 2)]
        k_ff = sol.ffwd[min(t, horizon - 2)]
        u = -(x @ k_gain.T) + k_ff
        states[t] = x
        commands[t] = u
        x = step(model, x, u, noise[t])
    return [Trajectory(model.dt, states[:, i], commands[:, i], origin="generated")
            for i in range(n_samples)]
