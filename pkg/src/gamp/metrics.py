"""Distribution-matching metrics between demonstration and sample sets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .gaussians import bhattacharyya, compensated_sum, gauss_mle
from .rollout import Trajectory


def _aligned_states(trajs: Sequence[Trajectory], dims: Optional[int]) -> np.ndarray:
    horizons = {t.horizon for t in trajs}
    if len(horizons) != 1:
        raise ValidationError("trajectories must share a horizon")
    stack = np.stack([t.states for t in trajs])
    return stack if dims is None else stack[..., :dims]


def mse_mean_traj(demos: Sequence[Trajectory], samples: Sequence[Trajectory],
                  dims: Optional[int] = None) -> float:
    """Mean squared error between the two sets' mean state trajectories."""
    d = _aligned_states(demos, dims).mean(axis=0)
    s = _aligned_states(samples, dims).mean(axis=0)
    if d.shape != s.shape:
        raise ValidationError("demo and sample horizons differ")
    return float(np.mean((d - s) ** 2))


def bd_traj(demos: Sequence[Trajectory], samples: Sequence[Trajectory],
            mode: str = "per_t", dims: Optional[int] = None) -> float:
    """Bhattacharyya distance between Gaussian approximations of the sets.

    ``per_t`` fits one Gaussian per timestep per side and averages the
    distance over time; ``final`` compares the final-state distributions.
    """
    if len(demos) < 2 or len(samples) < 2:
        raise ValidationError("need at least two trajectories per side")
    d = _aligned_states(demos, dims)
    s = _aligned_states(samples, dims)
    if mode == "final":
        return bhattacharyya(gauss_mle(d[:, -1]), gauss_mle(s[:, -1]))
    if mode != "per_t":
        raise ValidationError(f"unknown mode '{mode}'")
    if d.shape[1] != s.shape[1]:
        raise ValidationError("demo and sample horizons differ")
    vals = [bhattacharyya(gauss_mle(d[:, t]), gauss_mle(s[:, t]))
            for t in range(d.shape[1])]
    return compensated_sum(vals) / len(vals)


def mae_closest(rollouts: Sequence[Trajectory], demos: Sequence[Trajectory],
                pos_dims: Optional[int] = None) -> float:
    """Mean absolute position error to the closest demonstration, averaged
    over rollouts.  Not symmetric in its arguments."""
    r = _aligned_states(rollouts, pos_dims)
    d = _aligned_states(demos, pos_dims)
    if r.shape[1] != d.shape[1]:
        raise ValidationError("rollout and demo horizons differ")
    per_pair = np.mean(np.abs(r[:, None] - d[None]), axis=(2, 3))  # (R, D)
    return float(per_pair.min(axis=1).mean())


@dataclass(frozen=True)
class DivergenceStats:
    mean_final_dist: float
    final_state_std: float
    outliers: tuple

    def as_dict(self) -> dict:
        return {"mean_final_dist": self.mean_final_dist,
                "final_state_std": self.final_state_std,
                "outliers": list(self.outliers)}


def divergence_stats(rollouts: Sequence[Trajectory], demos: Sequence[Trajectory],
                     scale: float = 1.0) -> DivergenceStats:
    """Final-state drift statistics for long (for example doubled-horizon)
    rollouts: mean distance from the demonstrations' mean final state, and
    the RMS per-dimension spread of the rollout final states.  Rollouts
    landing beyond 100x the workspace scale are flagged as outliers."""
    if len(rollouts) < 2:
        raise ValidationError("need at least two rollouts")
    finals = np.stack([t.states[-1] for t in rollouts])
    demo_final = np.stack([t.states[-1] for t in demos]).mean(axis=0)
    dists = np.linalg.norm(finals - demo_final, axis=1)
    std = float(np.sqrt(finals.var(axis=0).mean()))
    outliers = tuple(int(i) for i in np.nonzero(dists > 100.0 * scale)[0])
    return DivergenceStats(float(dists.mean()), std, outliers)
