"""Exact Gaussian and Gaussian-mixture machinery.

Densities, affine pushforwards, precision-weighted products of linearly
mapped experts, conditioning, weighted maximum likelihood, EM with k-means
seeding, and the Bhattacharyya distance.  Everything here is plain numpy on
immutable values; the differentiable counterparts live next to their
consumers.

Covariances are symmetrized and eigenvalue-floored (``COV_FLOOR``) at
construction so downstream solves never see a singular matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NumericalError, ValidationError

COV_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


def compensated_sum(values) -> float:
    """Sum with full compensation (exact rounding of the float sum)."""
    arr = np.asarray(values, dtype=float).ravel()
    return math.fsum(arr.tolist())


def floor_spd(cov: np.ndarray, floor: float = COV_FLOOR) -> np.ndarray:
    """Symmetrize and clamp the eigenvalues of one or a batch of covariances."""
    cov = np.asarray(cov, dtype=float)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    w, v = np.linalg.eigh(cov)
    if np.all(w >= floor):
        return cov
    w = np.maximum(w, floor)
    return (v * w[..., None, :]) @ np.swapaxes(v, -1, -2)


@dataclass(frozen=True, eq=False)
class Gaussian:
    """Mean/covariance pair with cached factorization."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1:
            raise ValidationError("mean must be a vector")
        if cov.shape != (mean.size, mean.size):
            raise ValidationError(f"cov shape {cov.shape} does not match dim {mean.size}")
        asym = np.abs(cov - cov.T).max(initial=0.0)
        if asym > 1e-10 * max(1.0, np.abs(cov).max(initial=0.0)):
            raise ValidationError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", floor_spd(cov))
        object.__setattr__(self, "_chol", None)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def chol(self) -> np.ndarray:
        if self._chol is None:
            try:
                object.__setattr__(self, "_chol", np.linalg.cholesky(self.cov))
            except np.linalg.LinAlgError as exc:
                raise NumericalError("covariance not positive definite after floor") from exc
        return self._chol

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    @property
    def precision(self) -> np.ndarray:
        eye = np.eye(self.dim)
        half = solve_triangular(self.chol, eye, lower=True)
        return half.T @ half


def gauss_logpdf(g: Gaussian, x: np.ndarray):
    """log N(x | mean, cov); x may carry leading batch dimensions."""
    x = np.asarray(x, dtype=float)
    dz = x - g.mean
    sol = solve_triangular(g.chol, np.atleast_2d(dz.reshape(-1, g.dim)).T, lower=True)
    quad = np.sum(sol * sol, axis=0).reshape(dz.shape[:-1])
    out = -0.5 * (quad + g.logdet + g.dim * LOG_2PI)
    return float(out) if out.ndim == 0 else out


def gauss_sample(g: Gaussian, noise: np.ndarray) -> np.ndarray:
    """mean + L @ noise for caller-supplied standard-normal noise."""
    noise = np.asarray(noise, dtype=float)
    return g.mean + noise @ g.chol.T


def gauss_affine(g: Gaussian, a: np.ndarray, b=0.0) -> Gaussian:
    """Pushforward of the Gaussian through x -> A x + b."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    return Gaussian(a @ g.mean + b, a @ g.cov @ a.T)


@dataclass(frozen=True, eq=False)
class LinearExpert:
    """A Gaussian opinion about a linearly mapped value, A x + b ~ dist."""

    map: np.ndarray
    offset: np.ndarray
    dist: Gaussian

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.map, dtype=float))
        b = np.atleast_1d(np.asarray(self.offset, dtype=float))
        if a.shape[0] != self.dist.dim or b.size != self.dist.dim:
            raise ValidationError("expert map rows / offset must match dist dim")
        object.__setattr__(self, "map", a)
        object.__setattr__(self, "offset", b)
        rank = np.linalg.matrix_rank(a)
        object.__setattr__(self, "rank_deficient", bool(rank < a.shape[0]))

    @classmethod
    def identity(cls, dist: Gaussian) -> "LinearExpert":
        return cls(np.eye(dist.dim), np.zeros(dist.dim), dist)


def gauss_product(experts: Sequence[LinearExpert]) -> Gaussian:
    """Precision-weighted fusion of linearly mapped Gaussian experts.

    Returns the Gaussian with precision sum_p A_p^T P_p A_p and matching
    information vector; raises if the fused precision leaves some direction
    of the underlying variable unconstrained.
    """
    if len(experts) == 0:
        raise ValidationError("gauss_product requires at least one expert")
    d = experts[0].map.shape[1]
    lam = np.zeros((d, d))
    eta = np.zeros(d)
    for e in experts:
        if e.map.shape[1] != d:
            raise ValidationError("experts disagree on the underlying dimension")
        pa = e.dist.precision @ e.map
        lam += e.map.T @ pa
        eta += pa.T @ (e.dist.mean - e.offset)
    lam = 0.5 * (lam + lam.T)
    w, v = np.linalg.eigh(lam)
    tol = 1e-12 * max(1.0, float(w.max()))
    if float(w.min()) <= tol:
        bad = [np.array2string(v[:, i], precision=3) for i in np.nonzero(w <= tol)[0]]
        raise NumericalError("fused precision is singular along directions: " + "; ".join(bad))
    cov = (v * (1.0 / w)) @ v.T
    return Gaussian(cov @ eta, cov)


def gauss_condition(joint: Gaussian, observed_idx, value) -> Gaussian:
    """Condition a joint Gaussian on exact values of a subset of coordinates."""
    obs = np.atleast_1d(np.asarray(observed_idx, dtype=int))
    if np.unique(obs).size != obs.size:
        raise ValidationError("observed indices must be distinct")
    value = np.atleast_1d(np.asarray(value, dtype=float))
    if value.size != obs.size:
        raise ValidationError("value length must match number of observed indices")
    rest = np.setdiff1d(np.arange(joint.dim), obs)
    if rest.size == 0:
        raise ValidationError("conditioning on every coordinate leaves nothing")
    s_oo = joint.cov[np.ix_(obs, obs)]
    s_ro = joint.cov[np.ix_(rest, obs)]
    s_rr = joint.cov[np.ix_(rest, rest)]
    try:
        l_oo = np.linalg.cholesky(s_oo)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("observed block is singular") from exc
    half = solve_triangular(l_oo, s_ro.T, lower=True)
    gain = solve_triangular(l_oo.T, half, lower=False).T
    mean = joint.mean[rest] + gain @ (value - joint.mean[obs])
    cov = s_rr - half.T @ half
    return Gaussian(mean, 0.5 * (cov + cov.T))


def gauss_mle(points: np.ndarray, weights: Optional[np.ndarray] = None,
              floor: float = COV_FLOOR) -> Gaussian:
    """Weighted mean/covariance estimate with the covariance floor applied."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[0]
    if n < 2:
        raise ValidationError("maximum likelihood needs at least two points")
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (n,) or np.any(w < 0):
            raise ValidationError("weights must be a nonnegative length-N vector")
        tot = w.sum()
        if tot <= 0:
            raise ValidationError("weights must have positive total mass")
        w = w / tot
    mean = w @ pts
    diff = pts - mean
    cov = diff.T @ (diff * w[:, None])
    return Gaussian(mean, floor_spd(cov, floor))


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        comps = tuple(self.components)
        if len(comps) != w.size:
            raise ValidationError("weights and components disagree in count")
        if np.any(w < 0):
            raise ValidationError("mixture weights must be nonnegative")
        total = w.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"mixture weights sum to {total}, not 1")
        dims = {c.dim for c in comps}
        if len(dims) != 1:
            raise ValidationError("mixture components must share a dimension")
        object.__setattr__(self, "weights", w / total)
        object.__setattr__(self, "components", comps)

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim


def gmm_logpdf(g: GaussianMixture, x: np.ndarray):
    """Stable mixture log-density; x may carry leading batch dimensions."""
    x = np.asarray(x, dtype=float)
    comp = np.stack([np.log(g.weights[i]) + np.atleast_1d(gauss_logpdf(c, x))
                     for i, c in enumerate(g.components)])
    m = comp.max(axis=0)
    out = m + np.log(np.sum(np.exp(comp - m), axis=0))
    return float(out[0]) if x.ndim == 1 else out


def gmm_sample(g: GaussianMixture, rng: np.random.Generator, n: int) -> np.ndarray:
    picks = rng.choice(g.k, size=n, p=g.weights)
    noise = rng.standard_normal((n, g.dim))
    out = np.empty((n, g.dim))
    for k in range(g.k):
        sel = picks == k
        if np.any(sel):
            out[sel] = gauss_sample(g.components[k], noise[sel])
    return out


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
           iters: int = 20) -> np.ndarray:
    """k-means++ seeding followed by Lloyd iterations; returns labels.

    Assignment ties resolve to the lowest center index; an emptied cluster
    is reseeded at the point farthest from its assigned center.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[0]
    if n < k:
        raise ValidationError(f"need at least {k} points for {k} clusters")
    centers = np.empty((k, pts.shape[1]))
    centers[0] = pts[rng.integers(n)]
    d2 = np.sum((pts - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers[j] = pts[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((pts - centers[j]) ** 2, axis=1))
    labels = np.zeros(n, dtype=int)
    for _ in range(iters):
        dist = np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dist, axis=1)
        for j in range(k):
            sel = labels == j
            if not np.any(sel):
                worst = int(np.argmax(dist[np.arange(n), labels]))
                centers[j] = pts[worst]
                labels[worst] = j
            else:
                centers[j] = pts[sel].mean(axis=0)
    return labels


def _moments_from_labels(pts, labels, k, floor):
    weights = np.empty(k)
    comps = []
    overall = floor_spd(np.cov(pts.T, bias=True).reshape(pts.shape[1], pts.shape[1]), floor)
    for j in range(k):
        sel = labels == j
        weights[j] = sel.sum() / pts.shape[0]
        cluster = pts[sel]
        mean = cluster.mean(axis=0)
        if cluster.shape[0] >= 2:
            diff = cluster - mean
            cov = diff.T @ diff / cluster.shape[0]
        else:
            cov = overall
        comps.append(Gaussian(mean, floor_spd(cov, floor)))
    return GaussianMixture(weights, tuple(comps))


def gmm_em_step(points: np.ndarray, gmm: GaussianMixture,
                floor: float = COV_FLOOR) -> GaussianMixture:
    """One EM step from the given mixture; empty components are reseeded."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[0]
    logs = np.stack([np.log(gmm.weights[i]) + np.atleast_1d(gauss_logpdf(c, pts))
                     for i, c in enumerate(gmm.components)])
    m = logs.max(axis=0)
    norm = m + np.log(np.sum(np.exp(logs - m), axis=0))
    resp = np.exp(logs - norm)
    comps = []
    weights = np.empty(gmm.k)
    for j in range(gmm.k):
        r = resp[j]
        mass = r.sum()
        if mass < 1e-12:
            worst = int(np.argmin(norm))
            mean = pts[worst]
            cov = floor_spd(np.cov(pts.T, bias=True).reshape(pts.shape[1], -1), floor)
            weights[j] = 1.0 / n
        else:
            mean = (r @ pts) / mass
            diff = pts - mean
            cov = floor_spd(diff.T @ (diff * r[:, None]) / mass, floor)
            weights[j] = mass / n
        comps.append(Gaussian(mean, cov))
    return GaussianMixture(weights / weights.sum(), tuple(comps))


def em_fit_gmm(points: np.ndarray, k: int, steps: int = 10,
               rng: Optional[np.random.Generator] = None,
               floor: float = COV_FLOOR) -> GaussianMixture:
    """Fit a K-component mixture: k-means++ initialization, then EM steps."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] < k:
        raise ValidationError(f"need at least {k} points to fit {k} components")
    if rng is None:
        rng = np.random.default_rng(0)
    labels = kmeans(pts, k, rng)
    gmm = _moments_from_labels(pts, labels, k, floor)
    for _ in range(steps):
        gmm = gmm_em_step(pts, gmm, floor)
    return gmm


def bhattacharyya(g1: Gaussian, g2: Gaussian) -> float:
    """Bhattacharyya distance between two Gaussians (symmetric, >= 0)."""
    if g1.dim != g2.dim:
        raise ValidationError("distributions must share a dimension")
    avg = 0.5 * (g1.cov + g2.cov)
    try:
        l_avg = np.linalg.cholesky(avg)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("average covariance is singular") from exc
    diff = g1.mean - g2.mean
    sol = solve_triangular(l_avg, diff, lower=True)
    quad = float(sol @ sol) / 8.0
    logdet_avg = 2.0 * float(np.sum(np.log(np.diag(l_avg))))
    return quad + 0.5 * (logdet_avg - 0.5 * (g1.logdet + g2.logdet))
