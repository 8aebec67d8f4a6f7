"""Nozzle control: gradient-based receding-horizon MPC, Monte-Carlo start selection, baselines."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Emission, loss_and_gradient
from .fluid import emit_particles, step
from .loss import particle_loss, total_loss  # noqa: F401

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 10
    learning_rate: float = 0.1
    grad_iterations: int = 20
    step_clamp: float = 0.05  # cm per step
    lookahead: int = 100
    samples: int = 10
    init_grad_iterations: int = 5
    emit_in_rollout: bool = True

    def validate(self):
        for name in ("horizon", "lookahead", "samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"mpc.{name} must be >= 1")
        if self.grad_iterations < 0 or self.init_grad_iterations < 0:
            raise ValueError("mpc.grad_iterations must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("mpc.learning_rate must be > 0")
        if not self.step_clamp > 0:
            raise ValueError("mpc.step_clamp must be > 0")
        return self


def normalize_gradient(g):
    """Scale the whole trajectory gradient so its largest component has magnitude 1."""
    g = np.asarray(g, dtype=float)
    m = np.max(np.abs(g)) if g.size else 0.0
    if m == 0.0:
        return g.copy()
    return g / m


def clamp_step(current, proposed, max_step):
    current = np.asarray(current, dtype=float)
    proposed = np.asarray(proposed, dtype=float)
    d = proposed - current
    n = float(np.linalg.norm(d))
    if n <= max_step:
        return proposed.copy()
    return current + max_step * d / n


def feasible_trajectory(controls, previous, scene, max_step):
    """Project onto the nozzle box, then clamp every step against its predecessor."""
    lo, hi = scene.nozzle_bounds()
    u = np.clip(np.asarray(controls, dtype=float).reshape(-1, 3), lo, hi)
    prev = np.asarray(previous, dtype=float)
    for t in range(len(u)):
        u[t] = clamp_step(prev, u[t], max_step)
        prev = u[t]
    return u


def project_nozzle(point, scene):
    lo, hi = scene.nozzle_bounds()
    return np.clip(np.asarray(point, dtype=float), lo, hi)


@dataclass
class MpcDiagnostics:
    losses: list = field(default_factory=list)
    non_decreasing: list = field(default_factory=list)
    trajectory: np.ndarray | None = None


def mpc_step(system, previous, scene, config, step_index=0, seed=0, warm_start=None):
    """Optimise a ``horizon``-long nozzle trajectory and return its first point.

    The trajectory starts as ``previous`` repeated (or ``warm_start``), then
    ``grad_iterations`` times: roll out, back-propagate the lift loss,
    normalise, take a gradient step and re-project onto the feasible set.
    """
    previous = np.asarray(previous, dtype=float)
    if warm_start is None:
        u = np.repeat(previous[None, :], config.horizon, axis=0)
    else:
        u = np.asarray(warm_start, dtype=float).reshape(config.horizon, 3)
    u = feasible_trajectory(u, previous, scene, config.step_clamp)
    emission = Emission(seed, step_index) if config.emit_in_rollout else None
    diag = MpcDiagnostics()
    if system.count_below(scene.y_goal) == 0 and not _emits(system, scene, emission):
        diag.trajectory = u
        return u[0].copy(), diag
    for k in range(config.grad_iterations):
        loss, grad = loss_and_gradient(system, u, scene, emission)
        if diag.losses and loss >= diag.losses[-1]:
            diag.non_decreasing.append(k)
        diag.losses.append(loss)
        if not np.any(grad):
            break  # later iterations would repeat this one exactly
        u = feasible_trajectory(u - config.learning_rate * normalize_gradient(grad), previous, scene,
                                config.step_clamp)
    diag.trajectory = u
    return u[0].copy(), diag


def _emits(system, scene, emission):
    return emission is not None and scene.emission.rate > 0 and system.n_active < system.capacity


class MpcController:
    """Receding-horizon loop: one control per call, optimised tail reused as the next warm start."""

    def __init__(self, scene, config, start, seed=0):
        self.scene = scene
        self.config = config
        self.position = project_nozzle(start, scene)
        self.seed = seed
        self._tail = None
        self.history = []

    def __call__(self, system, step_index):
        u0, diag = mpc_step(system, self.position, self.scene, self.config, step_index, self.seed,
                            warm_start=self._tail)
        traj = diag.trajectory
        self._tail = np.concatenate([traj[1:], traj[-1:]], axis=0)
        self.position = u0
        self.history.append(diag)
        return u0


def run_controlled(system, scene, controller, start_step, n_steps, seed):
    """Advance the environment ``n_steps`` under ``controller``; returns the final system."""
    for t in range(start_step, start_step + n_steps):
        system = emit_particles(system, scene, t, seed)
        system = step(system, controller(system, t), scene)
    return system


def sample_start_points(system, count, seed, step_index):
    ids = np.flatnonzero(system.active)
    if len(ids) == 0:
        raise ValueError("cannot select a start point: no active particles")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(step_index), 3])
    chosen = rng.choice(ids, size=min(count, len(ids)), replace=False)
    return system.positions[chosen].copy()


def select_initial_point(system, scene, config, seed=0, step_index=0, return_details=False):
    """Monte-Carlo choice of the first nozzle position.

    Samples ``config.samples`` particle positions, runs the MPC loop for
    ``config.lookahead`` steps from each (with ``init_grad_iterations``
    gradient steps per plan) and keeps the start leaving the fewest
    particles below ``y_goal``; ties go to the earliest sample.
    """
    if system.n_active == 0:
        raise ValueError("cannot select a start point: no active particles")
    samples = sample_start_points(system, config.samples, seed, step_index)
    inner = replace(config, grad_iterations=config.init_grad_iterations)
    counts = []
    for s in samples:
        ctrl = MpcController(scene, inner, s, seed)
        final = run_controlled(system.copy(), scene, ctrl, step_index, config.lookahead, seed)
        counts.append(final.count_below(scene.y_goal))
        log.debug("start %s leaves %d particles", s, counts[-1])
    best = min(range(len(counts)), key=lambda k: (counts[k], k))
    point = project_nozzle(samples[best], scene)
    if return_details:
        return point, {"samples": samples, "counts": counts, "best": best}
    return point


# -- hand-crafted baselines -------------------------------------------------

POLICY_KINDS = ("mpc", "fixed_emission", "fixed_end", "fixed_middle", "end_to_emit")


@dataclass(frozen=True)
class Policy:
    kind: str
    path_index: int = 0
    rate: float | None = None  # cm per step for end_to_emit
    traversal_steps: int = 600  # used when rate is None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy {self.kind!r}; choose from {', '.join(POLICY_KINDS)}")
        if self.rate is not None and not self.rate > 0:
            raise ValueError("end_to_emit rate must be > 0")

    @classmethod
    def parse(cls, spec):
        """``kind`` or ``kind:path_index`` (e.g. ``fixed_end:1``)."""
        kind, _, idx = spec.partition(":")
        return cls(kind, int(idx) if idx else 0)

    @property
    def label(self):
        return self.kind if self.path_index == 0 else f"{self.kind}:{self.path_index}"


def baseline_control(policy, step_index, scene):
    """Nozzle position of a hand-crafted policy ``step_index`` steps after suction starts."""
    emit = np.asarray(scene.emission.point, dtype=float)
    end = scene.path_end(policy.path_index)
    if policy.kind == "fixed_emission":
        point = emit
    elif policy.kind == "fixed_end":
        point = end
    elif policy.kind == "fixed_middle":
        point = scene.midpoint(policy.path_index)
    elif policy.kind == "end_to_emit":
        length = float(np.linalg.norm(emit - end))
        rate = policy.rate if policy.rate is not None else length / policy.traversal_steps
        frac = 1.0 if length == 0 else min(1.0, step_index * rate / length)
        point = end + frac * (emit - end)
    else:
        raise ValueError(f"{policy.kind!r} is not a hand-crafted policy")
    return project_nozzle(point, scene)
