import dataclasses
import math

import numpy as np
import pytest

from suction_mpc.autodiff import (backward, compare_gradients, finite_difference_gradient, loss_and_gradient,
                                  rollout, rollout_loss)
from suction_mpc.experiment import run_gradcheck, toy_problem
from suction_mpc.fluid import ParticleSystem, step
from suction_mpc.loss import loss_node
from suction_mpc.scenes import Box, EmissionSpec, FluidParams, Scene
from suction_mpc.tape import Tape, TapeError, TapeMemoryError


def open_scene(**kw):
    base = dict(
        container=Box((-100.0, -100.0, -100.0), (100.0, 100.0, 100.0)),
        emission=EmissionSpec(point=(0.0, 0.0, 0.0), direction=(1.0, 0.0, 0.0), rate=0),
        flow_paths=(((0.0, 0.0, 0.0), (1.0, 0.0, 0.0)),),
        gravity=(0.0, 0.0, 0.0),
        warmup_steps=0,
    )
    base.update(kw)
    return Scene(**base)


def small_problem():
    return toy_problem(seed=5, n_particles=40, horizon=3)


def test_horizon_zero_is_identity():
    system, _, scene = small_problem()
    final, tape, states = rollout(system, np.zeros((0, 3)), scene)
    assert final.positions.tobytes() == system.positions.tobytes()
    assert states == [] and tape.controls == []


def test_taped_rollout_matches_untaped_and_plain_steps():
    system, controls, scene = small_problem()
    a, _, _ = rollout(system, controls, scene, tape=True)
    b, _, _ = rollout(system, controls, scene, tape=False)
    s = system.copy()
    for u in controls:
        s = step(s, u, scene)
    for other in (b, s):
        assert a.positions.tobytes() == other.positions.tobytes()
        assert a.velocities.tobytes() == other.velocities.tobytes()


def test_replay_reproduces_recorded_values():
    system, controls, scene = small_problem()
    _, tape, _ = rollout(system, controls, scene)
    assert tape.replay()


def test_zero_gradient_when_everything_is_above_goal():
    system = ParticleSystem.from_positions([[0.0, 20.0, 0.0], [0.6, 20.0, 0.3]])
    scene = open_scene(y_goal=10.0)
    loss, g = loss_and_gradient(system, [[0.0, 15.0, 0.0]] * 3, scene)
    assert loss == 0.0 and not g.any()


def test_single_particle_gradient_matches_closed_form():
    fluid = dataclasses.replace(FluidParams(), solver_iterations=1)
    scene = open_scene(y_goal=40.0, fluid=fluid)
    sp = scene.suction
    x = np.array([0.3, 1.0, -0.2])
    e = np.array([0.8, 2.5, 0.4])
    _, g = loss_and_gradient(ParticleSystem.from_positions([x]), [e], scene)

    # hand derivative: y' = y + lift(x, e) + pull_y(x, e); L = (y_goal - y')^2 / 2
    ox, oz = x[0] - e[0], x[2] - e[2]
    lift = sp.strength * math.exp(-ox ** 2 / (2 * sp.sigma_x ** 2) - oz ** 2 / (2 * sp.sigma_z ** 2)) / (
        2 * math.pi * sp.sigma_x * sp.sigma_z)
    d = e - x
    r = math.sqrt(d @ d)
    D = sp.softening
    pull_y = d[1] / (r * (r * r + D))
    y_new = x[1] + lift + pull_y
    dlift = np.array([lift * ox / sp.sigma_x ** 2, 0.0, lift * oz / sp.sigma_z ** 2])
    dpull = -d[1] * d * (3 * r * r + D) / (r ** 3 * (r * r + D) ** 2)
    dpull[1] += 1.0 / (r * (r * r + D))
    assert y_new < 40.0
    expected = -(40.0 - y_new) * (dlift + dpull)
    np.testing.assert_allclose(g[0], expected, rtol=1e-10)


def test_adjoint_matches_finite_differences_on_small_cloud():
    system, controls, scene = small_problem()
    _, g = loss_and_gradient(system, controls, scene)
    fd, used = finite_difference_gradient(system, controls, scene, delta=1e-4)
    report = compare_gradients(g, fd, used)
    assert report.passed, report.max_relative_error


def test_adjoint_is_linear_in_the_loss():
    system, controls, scene = small_problem()
    _, tape, _ = rollout(system, controls, scene)
    l1 = loss_node(tape, 10.0)
    l2 = loss_node(tape, 3.0)
    combo = tape.add(tape.scale(l1, 2.0), tape.scale(l2, -0.5))
    np.testing.assert_allclose(backward(tape, combo), 2.0 * backward(tape, l1) - 0.5 * backward(tape, l2),
                               rtol=1e-12, atol=1e-12)


def test_loss_node_from_another_tape_is_rejected():
    system, controls, scene = small_problem()
    _, t1, _ = rollout(system, controls, scene)
    _, t2, _ = rollout(system, controls, scene)
    with pytest.raises(TapeError):
        backward(t1, loss_node(t2, 10.0))


def test_memory_cap_is_an_error():
    system, controls, scene = small_problem()
    with pytest.raises(TapeMemoryError):
        rollout(system, controls, scene, memory_cap=10_000)


def test_default_cap_holds_full_scale_horizon():
    # budget for horizon 10 at 2000 particles, extrapolated from a 200-particle tape
    rng = np.random.default_rng(0)
    scene = toy_problem(0, 10, 1)[2]
    x = np.column_stack([rng.uniform(1, 11, 200), rng.uniform(0.05, 2.0, 200), rng.uniform(1, 11, 200)])
    _, tape, _ = rollout(ParticleSystem.from_positions(x), np.full((10, 3), 6.0), scene)
    assert tape.nbytes * 10 < Tape().memory_cap


def test_finite_difference_of_constant_loss_is_zero():
    system, controls, scene = small_problem()
    g, _ = finite_difference_gradient(system, controls, scene, loss_fn=lambda u, trace=None: 3.0)
    assert not g.any()


def test_finite_difference_slope_on_quadratic():
    target = np.array([1.0, 2.0, -1.0])

    def quad(u, trace=None):
        return float(np.sum((u - target) ** 2))

    u = np.array([[0.5, 0.5, 0.5], [2.0, 2.0, 2.0]])
    g, _ = finite_difference_gradient(None, u, None, delta=1e-3, loss_fn=quad)
    np.testing.assert_allclose(g, 2 * (u - target), rtol=1e-9)


def test_finite_difference_rejects_bad_delta():
    with pytest.raises(ValueError):
        finite_difference_gradient(None, np.zeros((1, 3)), None, delta=0.0)


def test_gradcheck_report_and_negative_control():
    ok = run_gradcheck(seed=1, n_particles=50, horizon=3)
    assert ok.passed
    assert len(ok.relative_errors) == 3 and all(len(row) == 3 for row in ok.relative_errors)
    bad = run_gradcheck(seed=1, n_particles=50, horizon=3, corrupt=True)
    assert not bad.passed


def test_rollout_loss_equals_taped_loss():
    system, controls, scene = small_problem()
    loss, _ = loss_and_gradient(system, controls, scene)
    assert rollout_loss(system, controls, scene) == loss
