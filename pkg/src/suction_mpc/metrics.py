"""Evaluation quantities: suction curves, convergence times, residuals and nozzle path length."""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SuctionCurve:
    """Remaining fraction of fluid per step, normalised by the count at suction start ``t0``."""

    steps: tuple
    fractions: tuple
    t0: int

    def __post_init__(self):
        if len(self.steps) != len(self.fractions) or not self.steps:
            raise ValueError("a curve needs one fraction per step and at least one sample")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError("curve steps must be strictly increasing")
        if self.steps[0] < self.t0:
            raise ValueError("curve starts before t0")

    @property
    def t_f(self):
        return self.steps[-1]

    @property
    def samples(self):
        return list(zip(self.steps, self.fractions))

    @property
    def exceeds_one(self):
        """True when ongoing emission pushed the curve above its starting value."""
        return max(self.fractions) > 1.0

    def to_csv(self):
        buf = io.StringIO()
        buf.write("step,fraction\n")
        for s, f in zip(self.steps, self.fractions):
            buf.write(f"{int(s)},{float(f)!r}\n")
        return buf.getvalue()


def record_curve(counts, t0, reference=None):
    """Curve from per-step counts of active particles below the goal, ``counts[k]`` at step ``t0 + k``.

    The reference volume defaults to ``counts[0]``, the amount present when
    suction starts.
    """
    counts = [int(c) for c in counts]
    if not counts:
        raise ValueError("no counts recorded")
    ref = counts[0] if reference is None else int(reference)
    if ref <= 0:
        fractions = tuple(0.0 for _ in counts)
    else:
        fractions = tuple(c / ref for c in counts)
    return SuctionCurve(tuple(range(t0, t0 + len(counts))), fractions, int(t0))


def convergence_time(curve, p):
    """Steps after ``t0`` until the curve first drops to ``(100 - p)%`` of its starting value.

    Returns None when that never happens.
    """
    if not 0 < p < 100:
        raise ValueError("p must lie strictly between 0 and 100")
    start = curve.fractions[0]
    threshold = (100 - p) / 100 * start
    for s, f in zip(curve.steps, curve.fractions):
        if f <= threshold:
            return s - curve.t0
    return None


def trajectory_length(controls):
    pts = np.asarray(controls, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("trajectory_length needs at least one control")
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


@dataclass
class RunResult:
    residual: float
    tau50: int | None
    tau60: int | None
    tau90: int | None
    trajectory_length: float
    curve: SuctionCurve
    policy: str
    seed: int
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_run(cls, curve, controls, policy, seed, config_hash="", extra=None):
        return cls(
            residual=curve.fractions[-1],
            tau50=convergence_time(curve, 50),
            tau60=convergence_time(curve, 60),
            tau90=convergence_time(curve, 90),
            trajectory_length=trajectory_length(controls),
            curve=curve,
            policy=policy,
            seed=int(seed),
            config_hash=config_hash,
            extra=dict(extra or {}),
        )

    def to_dict(self):
        return {
            "policy": self.policy,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "residual": self.residual,
            "tau50": self.tau50,
            "tau60": self.tau60,
            "tau90": self.tau90,
            "trajectory_length": self.trajectory_length,
            "t0": self.curve.t0,
            "t_f": self.curve.t_f,
            "curve_exceeds_one": self.curve.exceeds_one,
            **self.extra,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
