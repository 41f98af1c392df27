"""Demonstration sets: synthetic letter strokes, file IO, CSV export.

The built-in letter generator draws smooth spline strokes through
hand-placed control points inside a unit workspace, applies Gaussian
control-point jitter per demonstration, and derives commands as the exact
inverse dynamics of the chosen integrator, so re-integrating the commands
reproduces the positions to machine precision.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ValidationError
from .rollout import Trajectory

SCHEMA_VERSION = 1

# Control points in a roughly [-0.5, 0.5]^2 workspace, stroke order.  The
# strokes avoid revisiting their own path (no crossbars or tight hooks) so
# that velocity fields over position stay single-valued.
LETTER_POINTS = {
    "C": [(0.35, 0.35), (0.05, 0.48), (-0.3, 0.33), (-0.45, 0.0),
          (-0.3, -0.33), (0.05, -0.48), (0.35, -0.35)],
    "G": [(0.3, 0.38), (0.0, 0.48), (-0.33, 0.3), (-0.44, 0.0),
          (-0.33, -0.3), (0.0, -0.48), (0.3, -0.38), (0.38, -0.15)],
    "J": [(0.25, 0.5), (0.24, 0.12), (0.2, -0.28), (0.0, -0.5),
          (-0.25, -0.38)],
    "L": [(-0.3, 0.45), (-0.31, 0.1), (-0.3, -0.25), (-0.28, -0.45),
          (0.0, -0.46), (0.3, -0.45)],
    "N": [(-0.35, -0.45), (-0.37, 0.0), (-0.35, 0.45), (-0.1, 0.1),
          (0.15, -0.25), (0.35, -0.45), (0.37, 0.0), (0.35, 0.45)],
    "S": [(0.3, 0.42), (0.02, 0.5), (-0.24, 0.4), (-0.29, 0.22),
          (-0.1, 0.1), (0.1, -0.1), (0.29, -0.22), (0.24, -0.4),
          (-0.02, -0.5), (-0.3, -0.42)],
    "U": [(-0.35, 0.45), (-0.36, 0.0), (-0.25, -0.35), (0.0, -0.46),
          (0.25, -0.35), (0.36, 0.0), (0.35, 0.45)],
}

IDENTITY_FRAME = {"kind": "identity"}
AFFINE_FRAME = {"kind": "affine"}


@dataclass(frozen=True)
class DemoSet:
    """Aligned demonstrations plus their per-demo task frames."""

    dt: float
    state_dim: int
    command_dim: int
    demos: tuple
    task_frames: tuple = (IDENTITY_FRAME,)
    aligned: bool = True

    def __post_init__(self):
        demos = tuple(self.demos)
        if not demos:
            raise ValidationError("a demo set needs at least one trajectory")
        if self.aligned:
            horizons = {d.horizon for d in demos}
            if len(horizons) != 1:
                raise ValidationError("aligned demo set with unequal horizons")
        for d in demos:
            if d.state_dim != self.state_dim or d.command_dim != self.command_dim:
                raise ValidationError("trajectory dims disagree with the demo set")
            n_ctx = 0 if d.context is None else len(d.context)
            n_affine = sum(1 for f in self.task_frames if f["kind"] == "affine")
            if n_affine and n_ctx != len(self.task_frames):
                raise ValidationError("per-demo frame count must match task_frames")
        object.__setattr__(self, "demos", demos)
        object.__setattr__(self, "task_frames", tuple(self.task_frames))

    @property
    def horizon(self) -> int:
        return self.demos[0].horizon

    @property
    def n_demos(self) -> int:
        return len(self.demos)

    def states_at(self, t: int) -> np.ndarray:
        return np.stack([d.states[t] for d in self.demos])

    def initial_states(self) -> np.ndarray:
        return self.states_at(0)

    def final_states(self) -> np.ndarray:
        return np.stack([d.states[-1] for d in self.demos])


# ------------------------------------------------------------------ synthesis

def _smoothstep(tau):
    return tau * tau * (3.0 - 2.0 * tau)


def _time_warp(tau, coeffs):
    """Monotone warp of [0, 1] fixing both endpoints."""
    out = tau.copy()
    for k, a in enumerate(coeffs, start=1):
        out = out + a * np.sin(np.pi * k * tau) / (np.pi * k)
    return out


def _stroke_positions(points: np.ndarray, n_samples: int,
                      warp_coeffs=(), end_time: float = 1.0) -> np.ndarray:
    """Smooth curve through the control points, eased so endpoints rest.

    ``end_time < 1`` finishes the stroke early and holds the final position,
    the way recorded demonstrations end at slightly different instants.
    """
    pts = np.asarray(points, dtype=float)
    chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    if chord[-1] <= 0:
        raise ValidationError("degenerate stroke: control points coincide")
    spline = CubicSpline(chord / chord[-1], pts, axis=0)
    tau = np.linspace(0.0, 1.0, n_samples)
    if len(warp_coeffs):
        tau = _time_warp(tau, warp_coeffs)
    tau = np.minimum(tau / end_time, 1.0)
    return spline(_smoothstep(tau))


def _positions_to_trajectory(positions: np.ndarray, dt: float, mass: float,
                             kind: str, context=None) -> Trajectory:
    """Exact inverse dynamics of the integrator that will replay them."""
    pos = np.asarray(positions, dtype=float)
    if kind == "single":
        vel = (pos[1:] - pos[:-1]) / dt
        return Trajectory(dt, pos[:-1], vel, context=context, origin="demo")
    vel = (pos[1:] - pos[:-1]) / dt                # v_t, exact for pos updates
    force = mass * (vel[1:] - vel[:-1]) / dt       # u_t, exact for vel updates
    states = np.concatenate([pos[:-2], vel[:-1]], axis=1)
    return Trajectory(dt, states, force, context=context, origin="demo")


def _letter_control_points(letter) -> np.ndarray:
    if isinstance(letter, str):
        if letter not in LETTER_POINTS:
            raise ValidationError(
                f"unknown letter '{letter}'; available: {sorted(LETTER_POINTS)}")
        return np.asarray(LETTER_POINTS[letter], dtype=float)
    return np.atleast_2d(np.asarray(letter, dtype=float))


def _tremor(n_samples, dims, rng, amplitude, knots=24):
    """Smooth low-frequency position noise, the hand-tremor floor of
    recorded demonstrations."""
    grid = np.linspace(0.0, 1.0, knots)
    offsets = amplitude * rng.standard_normal((knots, dims))
    return CubicSpline(grid, offsets, axis=0)(np.linspace(0.0, 1.0, n_samples))


def _jittered_strokes(base_points, n_demos, n_samples, variability, rng,
                      time_warp: float = 0.12, end_hold: float = 0.1,
                      tremor_std: float = 1e-3):
    """Per-demo strokes with control-point jitter, a smooth random time warp
    (distinct stroke timing per demonstration), a per-demo end time with a
    final hold, and a small smooth tremor; the jitter deviations are rescaled
    around the ensemble mean so the per-time position std matches
    ``variability``."""
    base = _stroke_positions(base_points, n_samples)
    if variability <= 0 or n_demos < 2:
        return [base.copy() for _ in range(n_demos)]
    strokes = []
    for _ in range(n_demos):
        jitter = variability * rng.standard_normal(base_points.shape)
        warp = time_warp * rng.standard_normal(3) / np.sqrt(3)
        end_time = 1.0 - end_hold * rng.uniform(0.0, 1.0)
        strokes.append(_stroke_positions(base_points + jitter, n_samples, warp,
                                         end_time))
    stack = np.stack(strokes)
    center = stack.mean(axis=0)
    spread = stack.std(axis=0).mean()
    scale = variability / max(spread, 1e-12)
    dims = base.shape[1]
    return [center + (s - center) * scale
            + _tremor(n_samples, dims, rng, tremor_std)
            for s in strokes]


def synth_letters(letter, n_demos: int = 13, horizon: int = 200, dt: float = 0.01,
                  variability: float = 0.02, rng: Optional[np.random.Generator] = None,
                  mass: float = 1.0, kind: str = "double") -> DemoSet:
    """Point-mass letter demonstrations (kind 'double') or velocity strokes
    (kind 'single')."""
    if n_demos < 2:
        raise ValidationError("need at least two demonstrations")
    rng = rng if rng is not None else np.random.default_rng(0)
    base_points = _letter_control_points(letter)
    extra = 2 if kind == "double" else 1
    strokes = _jittered_strokes(base_points, n_demos, horizon + extra, variability, rng)
    demos = tuple(_positions_to_trajectory(s, dt, mass, kind) for s in strokes)
    state_dim = demos[0].state_dim
    return DemoSet(dt, state_dim, demos[0].command_dim, demos)


def rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def _self_clearance(path: np.ndarray, arc_fraction: float = 0.12) -> float:
    """Smallest distance between path points whose arc-length separation
    exceeds a fraction of the stroke length (slow segments do not count as
    self-approaches)."""
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    min_sep = arc_fraction * arc[-1]
    dists = np.linalg.norm(path[:, None, :] - path[None, :, :], axis=2)
    separated = np.abs(arc[:, None] - arc[None, :]) > min_sep
    if not separated.any():
        return np.inf
    return float(dists[separated].min())


def synth_two_frame(n_situations: int = 10, demos_per_situation: int = 5,
                    horizon: int = 200, dt: float = 0.01,
                    variability: float = 0.015,
                    rng: Optional[np.random.Generator] = None,
                    angle_range: float = 0.8, offset_range: float = 0.3,
                    min_clearance: float = 0.09):
    """Blended S-to-J strokes where the J part follows a per-situation frame.

    Returns (DemoSet, situations); each situation is the (angle, offset) pose
    of the moving object, and every demo carries two frames: the identity and
    the world-to-object transform.  Situations whose blended stroke would
    pass close to itself are rejected and redrawn: a time-independent flow
    over positions must stay single-valued along the path.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    # cursive variant of the S: the tail exits rightward, toward the object
    s_pts = np.array([(0.3, 0.42), (0.02, 0.5), (-0.24, 0.4), (-0.29, 0.22),
                      (-0.1, 0.1), (0.1, -0.1), (0.27, -0.26),
                      (0.3, -0.42)]) * 0.5 + np.array([-0.48, 0.0])
    j_pts = _letter_control_points("J") * 0.55
    demos = []
    situations = []
    while len(situations) < n_situations:
        angle = rng.uniform(-angle_range, angle_range)
        offset = np.array([rng.uniform(0.3, 0.3 + offset_range),
                           rng.uniform(-offset_range, offset_range)])
        rot = rotation(angle)
        j_world = j_pts @ rot.T + offset
        control = np.concatenate([s_pts, j_world], axis=0)
        if _self_clearance(_stroke_positions(control, horizon + 1)) < min_clearance:
            continue
        situations.append((angle, offset))
        a = rot.T
        b = -rot.T @ offset
        frames = ((np.eye(2), np.zeros(2)), (a, b))
        strokes = _jittered_strokes(control, demos_per_situation, horizon + 1,
                                    variability, rng)
        for s in strokes:
            demos.append(_positions_to_trajectory(s, dt, 1.0, "single",
                                                  context=frames))
    demo_set = DemoSet(dt, 2, 2, tuple(demos),
                       task_frames=(IDENTITY_FRAME, AFFINE_FRAME))
    return demo_set, situations


def synth_concat_letters(letters: Sequence[str], n_demos: int = 10,
                         horizon: int = 150, dt: float = 0.01,
                         variability: float = 0.02,
                         rng: Optional[np.random.Generator] = None) -> DemoSet:
    """Concatenated letters as one higher-dimensional velocity-controlled system."""
    rng = rng if rng is not None else np.random.default_rng(0)
    per_letter = []
    for letter in letters:
        strokes = _jittered_strokes(_letter_control_points(letter), n_demos,
                                    horizon + 1, variability, rng)
        per_letter.append(strokes)
    demos = []
    for i in range(n_demos):
        positions = np.concatenate([strokes[i] for strokes in per_letter], axis=1)
        demos.append(_positions_to_trajectory(positions, dt, 1.0, "single"))
    return DemoSet(dt, 2 * len(letters), 2 * len(letters), tuple(demos))


# ------------------------------------------------------------------ file IO

def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ValidationError(f"missing '{key}' at {where or '/'}")
    return doc[key]


def save_demoset(demo_set: DemoSet, path) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "dt": demo_set.dt,
        "state_dim": demo_set.state_dim,
        "command_dim": demo_set.command_dim,
        "aligned": demo_set.aligned,
        "task_frames": list(demo_set.task_frames),
        "demos": [
            {
                "states": d.states.tolist(),
                "commands": d.commands.tolist(),
                "frames": [
                    {"a": np.asarray(a).tolist(), "b": np.asarray(b).tolist()}
                    for a, b in (d.context or ())
                ],
            }
            for d in demo_set.demos
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_demoset(path) -> DemoSet:
    with open(path) as fh:
        doc = json.load(fh)
    version = _require(doc, "schema_version", "")
    if version > SCHEMA_VERSION:
        raise ValidationError(
            f"dataset schema_version {version} is newer than supported {SCHEMA_VERSION}")
    dt = float(_require(doc, "dt", ""))
    state_dim = int(_require(doc, "state_dim", ""))
    command_dim = int(_require(doc, "command_dim", ""))
    aligned = bool(doc.get("aligned", True))
    task_frames = tuple(doc.get("task_frames", [IDENTITY_FRAME]))
    demos = []
    for i, entry in enumerate(_require(doc, "demos", "")):
        where = f"/demos/{i}"
        states = np.asarray(_require(entry, "states", where), dtype=float)
        commands = np.asarray(_require(entry, "commands", where), dtype=float)
        frames = entry.get("frames", [])
        context = tuple((np.asarray(f["a"], dtype=float), np.asarray(f["b"], dtype=float))
                        for f in frames) or None
        try:
            demos.append(Trajectory(dt, states, commands, context=context, origin="demo"))
        except ValidationError as exc:
            raise ValidationError(f"{exc} at {where}") from exc
    return DemoSet(dt, state_dim, command_dim, tuple(demos),
                   task_frames=task_frames, aligned=aligned)


def trajectory_to_csv(traj: Trajectory, path) -> None:
    d, c = traj.state_dim, traj.command_dim
    header = ",".join(["t"] + [f"x{i}" for i in range(d)] + [f"u{i}" for i in range(c)])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for t in range(traj.horizon):
            row = [repr(float(t * traj.dt))]
            row += [repr(float(v)) for v in traj.states[t]]
            row += [repr(float(v)) for v in traj.commands[t]]
            fh.write(",".join(row) + "\n")


def trajectory_from_csv(path, state_dim: int, dt: float) -> Trajectory:
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    data = np.atleast_2d(data)
    states = data[:, 1 : 1 + state_dim]
    commands = data[:, 1 + state_dim :]
    return Trajectory(dt, states, commands)
