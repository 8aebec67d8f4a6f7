"""Differentiable rollouts: record the simulator on a tape and pull loss gradients back to the controls."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .fluid import ParticleSystem, emission_rows, rest_density, step_handles
from .loss import loss_node, total_loss
from .tape import Tape, TapeError, value


@dataclass(frozen=True)
class Emission:
    """Continue emitting during a rollout, as the environment would from ``start_step`` on."""

    seed: int
    start_step: int


def _emit(x, v, active, system_capacity, scene, emission, t, tape):
    n = len(value(x))
    probe = ParticleSystem(value(x), value(v), active, system_capacity)
    new_x, new_v = emission_rows(probe, scene, emission.start_step + t, emission.seed)
    if len(new_x) == 0:
        return x, v, active

    def grow(rows):
        def fwd(a):
            return np.concatenate([a, rows]), None
        return fwd

    def shrink(g, c, a):
        return (g[:n],)

    if tape is None:
        x, v = np.concatenate([x, new_x]), np.concatenate([v, new_v])
    else:
        x = tape.op("emit", grow(new_x), shrink, x)
        v = tape.op("emit", grow(new_v), shrink, v)
    return x, v, np.concatenate([active, np.ones(len(new_x), dtype=bool)])


def rollout(system, controls, scene, tape=True, emission=None, memory_cap=None, trace=None):
    """Run one step per control; returns ``(final_system, tape, states)``.

    ``states`` lists ``(positions, active)`` after every step. With
    ``tape=True`` a fresh :class:`Tape` records every sub-step and its
    ``controls``/``states`` attributes are filled for :func:`backward`.
    ``emission`` continues particle emission inside the rollout.
    """
    controls = np.asarray(controls, dtype=float).reshape(-1, 3)
    tp = None
    if tape:
        tp = Tape() if memory_cap is None else Tape(memory_cap=memory_cap)
    rho0 = rest_density(scene.fluid)
    x, v, active = system.positions, system.velocities, system.active.copy()
    if tp is not None:
        x, v = tp.leaf("positions", x), tp.leaf("velocities", v)
    states = []
    for t, u in enumerate(controls):
        e = u.copy()
        if tp is not None:
            e = tp.leaf("control", e)
            tp.controls.append(e)
        if emission is not None:
            x, v, active = _emit(x, v, active, system.capacity, scene, emission, t, tp)
        x, v, active = step_handles(x, v, e, active, scene, tp, rho0, trace)
        states.append((value(x), active))
        if tp is not None:
            tp.states.append((x, active))
        if trace is not None:
            trace.append(active)
            trace.append(value(x)[:, 1] < scene.y_goal)
    final = ParticleSystem(value(x).copy(), value(v).copy(), active, system.capacity)
    return final, tp, states


def backward(tape, loss):
    """Gradient of ``loss`` with respect to each recorded control, shape (horizon, 3)."""
    if not tape.owns(loss):
        raise TapeError("loss node is not on this tape")
    adj = tape.backward(loss)
    out = np.zeros((len(tape.controls), 3))
    for k, node in enumerate(tape.controls):
        if node.index < len(adj) and adj[node.index] is not None:
            out[k] = adj[node.index]
    if not np.isfinite(out).all():
        raise FloatingPointError("non-finite adjoint")
    return out


def loss_and_gradient(system, controls, scene, emission=None):
    _, tp, states = rollout(system, controls, scene, tape=True, emission=emission)
    node = loss_node(tp, scene.y_goal)
    return node.value, backward(tp, node)


def rollout_loss(system, controls, scene, emission=None, trace=None):
    _, _, states = rollout(system, controls, scene, tape=False, emission=emission, trace=trace)
    return total_loss(states, scene.y_goal)


def _signature(trace):
    return b"".join(np.ascontiguousarray(a).tobytes() for a in trace)


def finite_difference_gradient(system, controls, scene, delta=1e-4, emission=None, loss_fn=None,
                               max_retries=4):
    """Central differences of the rollout loss w.r.t. every control coordinate.

    When the perturbed runs change the discrete structure (neighbour sets,
    clamped coordinates, active set, loss branch) the step is halved and the
    coordinate retried. Returns ``(gradient, deltas_used)``.
    """
    if not delta > 0:
        raise ValueError("delta must be > 0")
    controls = np.asarray(controls, dtype=float).reshape(-1, 3)
    if loss_fn is None:
        def loss_fn(u, trace=None):
            return rollout_loss(system, u, scene, emission, trace)
    base_trace = []
    loss_fn(controls, base_trace)
    base_sig = _signature(base_trace)
    grad = np.zeros_like(controls)
    used = np.zeros_like(controls)
    for t in range(controls.shape[0]):
        for a in range(3):
            d = delta
            for _ in range(max_retries + 1):
                up, dn = controls.copy(), controls.copy()
                up[t, a] += d
                dn[t, a] -= d
                tr_up, tr_dn = [], []
                f_up = loss_fn(up, tr_up)
                f_dn = loss_fn(dn, tr_dn)
                if _signature(tr_up) == base_sig and _signature(tr_dn) == base_sig:
                    break
                d /= 2.0
            grad[t, a] = (f_up - f_dn) / (2.0 * d)
            used[t, a] = d
    return grad, used


@dataclass
class GradientReport:
    analytic: list
    finite_difference: list
    max_relative_error: float
    max_absolute_error: float
    relative_errors: list = field(default_factory=list)
    absolute_errors: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    worst: tuple = (0, 0)
    threshold: float = 1e-3

    @property
    def passed(self):
        return self.max_relative_error <= self.threshold

    def to_json(self):
        d = asdict(self)
        d["worst"] = {"step": int(self.worst[0]), "axis": "xyz"[self.worst[1]]}
        d["passed"] = self.passed
        return json.dumps(d, indent=2, sort_keys=True)


def compare_gradients(analytic, fd, deltas=None, threshold=1e-3, floor=1e-8):
    """Relative error per coordinate is ``|a - f| / max(|a|, floor)``."""
    analytic = np.asarray(analytic, dtype=float)
    fd = np.asarray(fd, dtype=float)
    abs_err = np.abs(analytic - fd)
    rel_err = abs_err / np.maximum(np.abs(analytic), floor)
    worst = np.unravel_index(int(np.argmax(rel_err)), rel_err.shape) if rel_err.size else (0, 0)
    return GradientReport(
        analytic=analytic.tolist(),
        finite_difference=fd.tolist(),
        max_relative_error=float(rel_err.max()) if rel_err.size else 0.0,
        max_absolute_error=float(abs_err.max()) if abs_err.size else 0.0,
        relative_errors=rel_err.tolist(),
        absolute_errors=abs_err.tolist(),
        deltas=[] if deltas is None else np.asarray(deltas).tolist(),
        worst=(int(worst[0]), int(worst[1])),
        threshold=threshold,
    )
