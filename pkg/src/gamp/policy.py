"""Per-task-space Gaussian policies and their fused product controller.

Two head families:

* time-varying feedback, ``-K(t) x - Kv(t) xdot + d(t)``, with diagonal
  positive gains realized through an elementwise exponential of
  basis-weighted logits and a covariance given as the matrix exponential of
  a basis-weighted symmetric log-matrix;
* state-dependent MLPs emitting the Gaussian's mean and a lower-triangular
  covariance factor with exponentiated diagonal.

The controller over raw commands is the precision-weighted product of the
heads, each viewed through the linearized command map of its task space.
Graph (``*_node``) and numeric forms share the same code path: numeric calls
bind parameters as constants and read values off the graph.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import taskspace as ts
from .errors import NumericalError, ValidationError
from .gaussians import COV_FLOOR, Gaussian

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class RbfBasis:
    """Normalized Gaussian bumps over normalized time [0, 1]."""

    centers: np.ndarray
    bandwidth: float

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=float)
        if centers.ndim != 1 or centers.size < 1:
            raise ValidationError("centers must be a nonempty vector")
        if np.any(np.diff(centers) <= 0):
            raise ValidationError("centers must be strictly increasing")
        if self.bandwidth <= 0:
            raise ValidationError("bandwidth must be positive")
        object.__setattr__(self, "centers", centers)

    @property
    def count(self) -> int:
        return self.centers.size

    @classmethod
    def uniform(cls, count: int, bandwidth_scale: float = 1.5) -> "RbfBasis":
        centers = np.linspace(0.0, 1.0, count)
        spacing = 1.0 if count == 1 else centers[1] - centers[0]
        return cls(centers, bandwidth_scale * spacing)

    def features(self, t) -> np.ndarray:
        """Activation weights at time(s) t, normalized to sum to one."""
        t = np.asarray(t, dtype=float)
        z = (t[..., None] - self.centers) / self.bandwidth
        raw = np.exp(-0.5 * z * z)
        return raw / raw.sum(axis=-1, keepdims=True)

    def features_dt(self, t) -> np.ndarray:
        """Time derivative of the normalized activations."""
        t = np.asarray(t, dtype=float)
        z = (t[..., None] - self.centers) / self.bandwidth
        raw = np.exp(-0.5 * z * z)
        draw = raw * (-z / self.bandwidth)
        total = raw.sum(axis=-1, keepdims=True)
        dtotal = draw.sum(axis=-1, keepdims=True)
        return (draw * total - raw * dtotal) / (total * total)


def rbf_features(basis: RbfBasis, t) -> np.ndarray:
    return basis.features(t)


def _vech_index(d):
    return np.tril_indices(d)


# ------------------------------------------------------------------ heads

@dataclass(frozen=True)
class FeedbackHead:
    """Time-varying feedback controller head in one task space."""

    name: str
    basis: RbfBasis
    dim: int
    use_velocity_gain: bool

    def param_spec(self) -> dict:
        n, k = self.basis.count, self.dim
        v = k * (k + 1) // 2
        spec = {
            f"{self.name}.gain_logits": (n, k),
            f"{self.name}.ffwd": (n, k),
            f"{self.name}.cov_logs": (n, v),
        }
        if self.use_velocity_gain:
            spec[f"{self.name}.vel_gain_logits"] = (n, k)
        return spec

    def init_values(self, rng, gain0=5.0, vel_gain0=2.0, sigma0=0.5) -> dict:
        n, k = self.basis.count, self.dim
        v = k * (k + 1) // 2
        cov_logs = np.zeros((n, v))
        diag_slots = np.nonzero(np.equal(*_vech_index(k)))[0]
        cov_logs[:, diag_slots] = 2.0 * np.log(sigma0)
        vals = {
            f"{self.name}.gain_logits": np.full((n, k), np.log(gain0)),
            f"{self.name}.ffwd": np.zeros((n, k)),
            f"{self.name}.cov_logs": cov_logs,
        }
        if self.use_velocity_gain:
            vals[f"{self.name}.vel_gain_logits"] = np.full((n, k), np.log(vel_gain0))
        return vals

    def precompute(self, bound: dict, t_grid: np.ndarray) -> dict:
        """Gain/feed-forward/covariance tracks over a grid of times."""
        phi = ad.constant(self.basis.features(t_grid))  # (T, n)
        gains = ad.exp(ad.matmul(phi, bound[f"{self.name}.gain_logits"]))
        ffwd = ad.matmul(phi, bound[f"{self.name}.ffwd"])
        logs = ad.sym_from_tril(ad.matmul(phi, bound[f"{self.name}.cov_logs"]), self.dim)
        cov = ad.sym_expm(logs) + ad.constant(COV_FLOOR * np.eye(self.dim))
        pre = {"gains": gains, "ffwd": ffwd, "cov": cov, "chol": ad.cholesky(cov)}
        if self.use_velocity_gain:
            pre["vel_gains"] = ad.exp(ad.matmul(phi, bound[f"{self.name}.vel_gain_logits"]))
        return pre

    def eval_node(self, pre: dict, t_idx: int, lifted: ad.Node):
        """Gaussian over the lifted command at one time index."""
        if self.use_velocity_gain:
            x = lifted[..., : self.dim]
            xdot = lifted[..., self.dim :]
            mean = -ad.mul(pre["gains"][t_idx], x) \
                - ad.mul(pre["vel_gains"][t_idx], xdot) + pre["ffwd"][t_idx]
        else:
            mean = -ad.mul(pre["gains"][t_idx], lifted) + pre["ffwd"][t_idx]
        return mean, pre["cov"][t_idx], pre["chol"][t_idx]

    def eval_node_track(self, pre: dict, lifted: ad.Node):
        """Vectorized evaluation: row i of `lifted` pairs with time row i of
        the precomputed tracks."""
        if self.use_velocity_gain:
            x = lifted[..., : self.dim]
            xdot = lifted[..., self.dim :]
            mean = -ad.mul(pre["gains"], x) - ad.mul(pre["vel_gains"], xdot) \
                + pre["ffwd"]
        else:
            mean = -ad.mul(pre["gains"], lifted) + pre["ffwd"]
        return mean, pre["cov"], pre["chol"]


@dataclass(frozen=True)
class MlpHead:
    """Time-independent head: an MLP emits the Gaussian's mean and factor."""

    name: str
    in_dim: int
    out_dim: int
    widths: tuple = (150, 150)

    def param_spec(self) -> dict:
        h1, h2 = self.widths
        v = self.out_dim * (self.out_dim + 1) // 2
        p = self.name
        return {
            f"{p}.w1": (h1, self.in_dim), f"{p}.b1": (h1,),
            f"{p}.w2": (h2, h1), f"{p}.b2": (h2,),
            f"{p}.w_mu": (self.out_dim, h2), f"{p}.b_mu": (self.out_dim,),
            f"{p}.w_l": (v, h2), f"{p}.b_l": (v,),
        }

    def init_values(self, rng, sigma0=0.3) -> dict:
        h1, h2 = self.widths
        v = self.out_dim * (self.out_dim + 1) // 2
        b_l = np.zeros(v)
        diag_slots = np.nonzero(np.equal(*_vech_index(self.out_dim)))[0]
        b_l[diag_slots] = np.log(sigma0)
        p = self.name
        return {
            f"{p}.w1": rng.standard_normal((h1, self.in_dim)) / np.sqrt(self.in_dim),
            f"{p}.b1": np.zeros(h1),
            f"{p}.w2": rng.standard_normal((h2, h1)) / np.sqrt(h1),
            f"{p}.b2": np.zeros(h2),
            f"{p}.w_mu": 0.01 * rng.standard_normal((self.out_dim, h2)),
            f"{p}.b_mu": np.zeros(self.out_dim),
            f"{p}.w_l": 0.01 * rng.standard_normal((v, h2)),
            f"{p}.b_l": b_l,
        }

    def precompute(self, bound: dict, t_grid) -> Optional[dict]:
        return None

    def eval_node(self, bound: dict, lifted: ad.Node):
        p = self.name
        h = ad.tanh(ad.matmul(lifted, ad.transpose_last(bound[f"{p}.w1"])) + bound[f"{p}.b1"])
        h = ad.tanh(ad.matmul(h, ad.transpose_last(bound[f"{p}.w2"])) + bound[f"{p}.b2"])
        mean = ad.matmul(h, ad.transpose_last(bound[f"{p}.w_mu"])) + bound[f"{p}.b_mu"]
        lflat = ad.matmul(h, ad.transpose_last(bound[f"{p}.w_l"])) + bound[f"{p}.b_l"]
        low = ad.tril_from_flat(lflat, self.out_dim, exp_diag=True)
        cov = ad.matmul(low, ad.transpose_last(low)) + ad.constant(
            COV_FLOOR * np.eye(self.out_dim))
        return mean, cov, ad.cholesky(cov)


# ------------------------------------------------------------------ policy

@dataclass(frozen=True)
class PoGPolicy:
    """Product-of-Gaussian-policies controller over raw commands."""

    task_maps: tuple
    heads: tuple
    strategy: ts.ControlStrategy
    state_dim: int
    command_dim: int

    def __post_init__(self):
        if len(self.task_maps) != len(self.heads):
            raise ValidationError("one head per task map")

    def param_spec(self) -> dict:
        spec = {}
        for head in self.heads:
            spec.update(head.param_spec())
        return spec

    def init_params(self, rng, **kwargs) -> ad.ParamVector:
        init = {}
        for head in self.heads:
            init.update(head.init_values(rng, **kwargs))
        return ad.ParamVector.build(self.param_spec(), init)

    def precompute(self, bound: dict, t_grid: np.ndarray) -> list:
        return [head.precompute(bound, t_grid) for head in self.heads]


def make_feedback_policy(state_dim: int, command_dim: int, task_maps=None,
                         strategy: ts.ControlStrategy = None, n_basis: int = 30,
                         bandwidth_scale: float = 1.5) -> PoGPolicy:
    strategy = strategy or ts.ControlStrategy(ts.ACCELERATION)
    task_maps = tuple(task_maps) if task_maps else (ts.TaskMap.identity(
        state_dim // 2 if strategy.has_velocity else state_dim),)
    basis = RbfBasis.uniform(n_basis, bandwidth_scale)
    heads = tuple(
        FeedbackHead(f"h{i}", basis, m.output_dim, strategy.has_velocity)
        for i, m in enumerate(task_maps))
    return PoGPolicy(task_maps, heads, strategy, state_dim, command_dim)


def make_mlp_policy(state_dim: int, command_dim: int, task_maps=None,
                    strategy: ts.ControlStrategy = None,
                    widths=(150, 150)) -> PoGPolicy:
    strategy = strategy or ts.ControlStrategy(ts.VELOCITY)
    task_maps = tuple(task_maps) if task_maps else (ts.TaskMap.identity(state_dim),)
    heads = []
    for i, m in enumerate(task_maps):
        in_dim = m.output_dim * (2 if strategy.has_velocity else 1)
        heads.append(MlpHead(f"h{i}", in_dim, m.output_dim, tuple(widths)))
    return PoGPolicy(task_maps, tuple(heads), strategy, state_dim, command_dim)


# ------------------------------------------------------------------ fusion

def _head_gaussian_node(policy, head, task_map, bound, pre, t_idx, xi):
    lifted = ts.lift_state_node(task_map, policy.strategy, xi)
    if isinstance(head, FeedbackHead):
        return head.eval_node(pre, t_idx, lifted)
    return head.eval_node(bound, lifted)


def pogp_eval_node(policy: PoGPolicy, bound: dict, pre: list, t_idx: int,
                   xi: ad.Node, maps=None):
    """Fused Gaussian over the raw command: (mean, cov, chol) nodes."""
    maps = tuple(maps) if maps is not None else policy.task_maps
    single = (len(policy.heads) == 1 and maps[0].kind == "identity"
              and policy.strategy.kind != ts.FORCE)
    if single:
        return _head_gaussian_node(policy, policy.heads[0], maps[0], bound,
                                   pre[0], t_idx, xi)

    q = xi[..., : maps[0].input_dim]
    lam = None
    eta = None
    for head, task_map, head_pre in zip(policy.heads, maps, pre):
        mean_p, cov_p, _ = _head_gaussian_node(policy, head, task_map, bound,
                                               head_pre, t_idx, xi)
        a_p = ts.command_matrix_node(task_map, policy.strategy, q)
        prec_p = ad.solve_psd(cov_p, ad.constant(np.eye(mean_p.shape[-1])))
        at_prec = ad.matmul(ad.transpose_last(a_p), prec_p)
        term_lam = ad.matmul(at_prec, a_p)
        term_eta = ad.matmul(at_prec, ad.reshape(mean_p, mean_p.shape + (1,)))
        lam = term_lam if lam is None else lam + term_lam
        eta = term_eta if eta is None else eta + term_eta

    lam_val = lam.value
    w = np.linalg.eigvalsh(lam_val)
    if float(w.min()) <= 1e-10 * max(1.0, float(w.max())):
        raise NumericalError(
            "fused command precision is singular; unconstrained directions "
            f"with eigenvalues {w[w <= 1e-10 * max(1.0, float(w.max()))]}")
    eye_u = np.eye(policy.command_dim)
    cov = ad.solve_psd(lam, ad.constant(eye_u))
    mean = ad.solve_psd(lam, eta)
    mean = ad.reshape(mean, mean.shape[:-1])
    return mean, cov, ad.cholesky(cov)


def policy_logpdf_node(policy: PoGPolicy, bound: dict, pre: list, t_idx: int,
                       xi: ad.Node, u: ad.Node, maps=None) -> ad.Node:
    """Log-density of the fused policy at raw command u (batched)."""
    mean, cov, _ = pogp_eval_node(policy, bound, pre, t_idx, xi, maps=maps)
    dz = u - mean
    sol = ad.solve_psd(cov, ad.reshape(dz, dz.shape + (1,)))
    quad = ad.sum_(ad.mul(dz, ad.reshape(sol, dz.shape)), axis=-1)
    logdet = ad.logdet_psd(cov)
    return ad.mul(quad + logdet + ad.constant(policy.command_dim * LOG_2PI), -0.5)


# ------------------------------------------------------------------ numeric

def _as_time_grid(policy, t):
    return np.atleast_1d(np.asarray(t, dtype=float))


def head_eval(head, params: ad.ParamVector, task_map, strategy, t, xi) -> Gaussian:
    """Numeric single-head evaluation, returning the lifted-command Gaussian."""
    bound = {k: ad.constant(v) for k, v in
             ((name, params.view(name)) for name in params.layout)}
    lifted = ts.lift_state(task_map, strategy, np.asarray(xi, dtype=float))
    lifted_node = ad.constant(lifted)
    if isinstance(head, FeedbackHead):
        pre = head.precompute(bound, np.atleast_1d(float(t)))
        mean, cov, _ = head.eval_node(pre, 0, lifted_node)
    else:
        mean, cov, _ = head.eval_node(bound, lifted_node)
    cov_val = cov.value if cov.value.ndim == 2 else cov.value
    return Gaussian(mean.value, cov_val)


def pogp_eval(policy: PoGPolicy, params: ad.ParamVector, t, xi,
              maps=None) -> Gaussian:
    bound = {name: ad.constant(params.view(name)) for name in params.layout}
    pre = policy.precompute(bound, np.atleast_1d(float(t)))
    mean, cov, _ = pogp_eval_node(policy, bound, pre, 0,
                                  ad.constant(np.asarray(xi, dtype=float)), maps=maps)
    return Gaussian(mean.value, cov.value if cov.value.ndim == 2 else cov.value)


def policy_logpdf(policy: PoGPolicy, params: ad.ParamVector, t, xi, u,
                  maps=None) -> float:
    bound = {name: ad.constant(params.view(name)) for name in params.layout}
    pre = policy.precompute(bound, np.atleast_1d(float(t)))
    out = policy_logpdf_node(policy, bound, pre, 0,
                             ad.constant(np.asarray(xi, dtype=float)),
                             ad.constant(np.asarray(u, dtype=float)), maps=maps)
    return float(out.value)


def realized_gains(policy: PoGPolicy, params: ad.ParamVector,
                   t_grid: np.ndarray) -> list:
    """Per-head positive gain tracks, for inspection and tests.

    Each feedback head yields {"gain": (T, k), "vel_gain": (T, k) or None};
    MLP heads yield None.
    """
    bound = {name: ad.constant(params.view(name)) for name in params.layout}
    out = []
    for head in policy.heads:
        if isinstance(head, FeedbackHead):
            pre = head.precompute(bound, np.asarray(t_grid, dtype=float))
            out.append({"gain": pre["gains"].value,
                        "vel_gain": (pre["vel_gains"].value
                                     if head.use_velocity_gain else None)})
        else:
            out.append(None)
    return out
