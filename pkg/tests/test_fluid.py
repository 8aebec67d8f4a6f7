import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from suction_mpc.fluid import (ParticleSystem, SimulationError, calibrate_rest_density, compute_lambda,
                               compute_lambdas, deactivate_lifted, density_corrections, density_error,
                               emit_particles, project_points, solve_density_constraint, step)
from suction_mpc.neighbors import build_neighbors
from suction_mpc.scenes import Box, EmissionSpec, FluidParams, Scene
from suction_mpc.tape import Tape

import oracles

LAMBDA_TWO_PARTICLES = -0.002850696441553266  # oracles.lambdas, d = h/2, rho0 = 1.7, eps = 100
LATTICE_RHO0 = 8.078201335157481  # oracles.lattice_rest_density(1, 0.5)


def open_scene(**kw):
    """Large box with nothing nearby: boundary-free for the particle sets used below."""
    base = dict(
        container=Box((-100.0, -100.0, -100.0), (100.0, 100.0, 100.0)),
        emission=EmissionSpec(point=(0.0, 0.0, 0.0), direction=(1.0, 0.0, 0.0), rate=0),
        flow_paths=(((0.0, 0.0, 0.0), (1.0, 0.0, 0.0)),),
        gravity=(0.0, 0.0, 0.0),
        y_goal=99.0,
        warmup_steps=0,
    )
    base.update(kw)
    return Scene(**base)


def test_rest_density_calibration():
    assert calibrate_rest_density(1.0, 0.5) == pytest.approx(LATTICE_RHO0, rel=1e-13)


def test_two_particle_lambda():
    params = FluidParams(rest_density=1.7, cfm_epsilon=100.0)
    system = ParticleSystem.from_positions([[0, 0, 0], [0.5, 0, 0]])
    table = build_neighbors(system.positions, 1.0)
    a = compute_lambda(0, system, table, params)
    b = compute_lambda(1, system, table, params)
    assert a == b
    assert a == pytest.approx(LAMBDA_TWO_PARTICLES, rel=1e-12)


def cluster():
    return np.array([[0.0, 0.0, 0.0], [0.45, 0.1, 0.0], [0.1, 0.5, 0.2], [-0.3, 0.2, 0.4], [0.2, -0.35, -0.3]])


def test_five_particle_corrections_against_term_by_term_oracle():
    p = cluster()
    rho0, eps = 1.9, 100.0
    params = FluidParams(rest_density=rho0, cfm_epsilon=eps)
    table = build_neighbors(p, 1.0)
    lam = compute_lambdas(p, table, rho0, params)
    lam_ref = oracles.lambdas(p.tolist(), 1.0, rho0, eps)
    np.testing.assert_allclose(lam, [float(v) for v in lam_ref], rtol=1e-12)
    dx = density_corrections(p, table, lam, rho0, params)
    ref = oracles.corrections(p.tolist(), lam_ref, 1.0, rho0)
    np.testing.assert_allclose(dx, [[float(c) for c in row] for row in ref], rtol=1e-11, atol=1e-15)


def test_overdense_pair_is_pushed_apart():
    p = np.array([[0.0, 0, 0], [0.2, 0, 0]])
    params = FluidParams(rest_density=1.0)
    table = build_neighbors(p, 1.0)
    dx = density_corrections(p, table, compute_lambdas(p, table, 1.0, params), 1.0, params)
    assert dx[0, 0] < 0 < dx[1, 0]


def test_solve_density_constraint_full_length():
    system = ParticleSystem.from_positions(np.vstack([cluster(), [[9.0, 9.0, 9.0]]]))
    system.active[-1] = False
    params = FluidParams()
    ids = np.flatnonzero(system.active)
    table = build_neighbors(system.positions[ids], 1.0, ids)
    lam = compute_lambdas(system.positions[ids], table, calibrate_rest_density(1.0, 0.5), params)
    out = solve_density_constraint(system, table, lam, params)
    assert out.shape == system.positions.shape
    assert not out[-1].any()


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 50), st.integers(0, 2 ** 32 - 1))
def test_pairwise_momentum(n, seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 1.6, (n, 3))
    params = FluidParams()
    rho0 = calibrate_rest_density(1.0, 0.5)
    table = build_neighbors(p, 1.0)
    dx = density_corrections(p, table, compute_lambdas(p, table, rho0, params), rho0, params)
    biggest = np.linalg.norm(dx, axis=1).max()
    assert np.linalg.norm(dx.sum(axis=0)) <= 1e-10 * n * biggest + 1e-300


def test_density_error_does_not_grow_on_resting_cube():
    g = np.arange(6) * 0.5
    p = np.array([(x, y, z) for x in g for y in g for z in g])
    interior = np.all((p > 0.75) & (p < 1.75), axis=1)
    params = FluidParams()
    rho0 = calibrate_rest_density(1.0, 0.5)
    table = build_neighbors(p, 1.0)
    before = np.abs(density_error(p, table, rho0, params))[interior].mean()
    q = p.copy()
    for _ in range(4):
        q = q + density_corrections(q, table, compute_lambdas(q, table, rho0, params), rho0, params)
    after = np.abs(density_error(q, table, rho0, params))[interior].mean()
    assert after <= before


# -- boundary -------------------------------------------------------------------

def cavity():
    return Scene(
        container=Box((0.0, 0.0, 0.0), (10.0, 4.0, 10.0)),
        obstacles=(Box((3.0, 0.0, 3.0), (6.0, 2.0, 5.0)),),
        emission=EmissionSpec(point=(1.0, 1.0, 1.0), direction=(1.0, 0.0, 0.0), rate=5),
        flow_paths=(((1.0, 1.0, 1.0), (9.0, 1.0, 9.0)),),
        max_particles=1000,
    )


def test_floor_projection():
    p, clamped = project_points(np.array([[2.0, -0.3, 7.0]]), cavity())
    np.testing.assert_array_equal(p, [[2.0, 0.01, 7.0]])
    assert clamped.tolist() == [[False, True, False]]


def test_open_top_has_no_ceiling():
    p, _ = project_points(np.array([[2.0, 50.0, 7.0]]), cavity())
    assert p[0, 1] == 50.0


@pytest.mark.parametrize("point", [(3.4, 1.0, 4.0), (4.5, 1.7, 4.1), (5.8, 0.5, 3.2), (4.4, 0.2, 3.9)])
def test_obstacle_projection_matches_sampling_oracle(point):
    scene = cavity()
    m = scene.fluid.boundary_margin
    lo = [c - m for c in scene.obstacles[0].lo]
    hi = [c + m for c in scene.obstacles[0].hi]
    # the block stands on the container floor, so its bottom face is not an exit
    usable = {(0, 0), (0, 1), (1, 1), (2, 0), (2, 1)}
    q, d = oracles.nearest_outside_box(point, lo, hi, samples=121, faces=usable)
    p, clamped = project_points(np.array([point]), scene)
    cell = max(h_ - l_ for h_, l_ in zip(hi, lo)) / 120
    np.testing.assert_allclose(p[0], q, atol=cell)
    # sampled faces only bound the true distance from above
    moved = np.linalg.norm(p[0] - np.array(point))
    assert d - cell * 2 ** 0.5 <= moved <= d + 1e-12
    assert clamped[0].sum() == 1


# -- emission / removal ------------------------------------------------------------

def test_emission_rate_and_capacity():
    scene = cavity()
    s = ParticleSystem.empty(1000)
    for t in range(10):
        s = emit_particles(s, scene, t, seed=3)
    assert s.n_active == 50
    full = ParticleSystem.empty(12)
    for t in range(10):
        full = emit_particles(full, scene, t, seed=3)
    assert full.n_active == 12


def test_removed_particles_free_their_slots():
    scene = cavity()
    s = ParticleSystem.empty(10)
    s = emit_particles(emit_particles(s, scene, 0), scene, 1)
    s.positions[:3, 1] = 20.0
    s, removed = deactivate_lifted(s, scene.y_goal)
    assert removed == 3 and s.n_active == 7
    s = emit_particles(s, scene, 2)
    assert s.n_active == 10 and len(s) == 10


def test_emission_is_deterministic_per_seed():
    scene = cavity()
    a = emit_particles(ParticleSystem.empty(100), scene, 4, seed=9)
    b = emit_particles(ParticleSystem.empty(100), scene, 4, seed=9)
    c = emit_particles(ParticleSystem.empty(100), scene, 4, seed=10)
    assert a.positions.tobytes() == b.positions.tobytes()
    assert a.positions.tobytes() != c.positions.tobytes()
    np.testing.assert_array_equal(a.velocities, np.tile([20.0, 0, 0], (5, 1)))


def test_deactivate_examples():
    s = ParticleSystem.from_positions(np.column_stack([np.zeros(10), np.arange(10) * 1.0 + 2.5, np.zeros(10)]))
    s2, removed = deactivate_lifted(s, 9.5)
    assert removed == 3 and s2.n_active == 7
    at_goal = ParticleSystem.from_positions([[0.0, 10.0, 0.0]])
    assert deactivate_lifted(at_goal, 10.0)[1] == 1
    low = ParticleSystem.from_positions([[0.0, 1.0, 0.0]])
    assert deactivate_lifted(low, 10.0)[1] == 0


# -- whole step -----------------------------------------------------------------------

def test_resting_particle_without_gravity_stays_put():
    s = ParticleSystem.from_positions([[0.3, 0.2, 0.1]])
    out = step(s, None, open_scene())
    np.testing.assert_array_equal(out.positions, s.positions)


def test_free_fall_step():
    scene = open_scene(gravity=(0.0, -981.0, 0.0))
    s = ParticleSystem.from_positions([[0.0, 5.0, 0.0]], [[1.0, 2.0, 0.0]])
    out = step(s, None, scene)
    np.testing.assert_allclose(out.velocities, [[1.0, 2.0 - 9.81, 0.0]], rtol=1e-14)
    np.testing.assert_allclose(out.positions, [[0.01, 5.0 + 0.01 * (2.0 - 9.81), 0.0]], rtol=1e-14)


def test_taped_and_untaped_steps_are_bitwise_equal():
    scene = cavity()
    s = ParticleSystem.empty(400)
    for t in range(30):
        s = emit_particles(s, scene, t)
        s = step(s, None, scene)
    nozzle = np.array([2.0, 1.0, 2.0])
    plain = step(s, nozzle, scene)
    taped = step(s, nozzle, scene, tape=Tape())
    assert plain.positions.tobytes() == taped.positions.tobytes()
    assert plain.velocities.tobytes() == taped.velocities.tobytes()
    assert np.array_equal(plain.active, taped.active)


def test_non_finite_state_names_particle():
    s = ParticleSystem.from_positions([[1.0, 1.0, 1.0], [2.0, 1.0, 2.0]])
    s.velocities[1, 0] = np.inf
    with pytest.raises(SimulationError) as info:
        step(s, None, cavity())
    assert info.value.particle == 1
    assert info.value.substep == "predict"


def test_fluid_params_validation():
    with pytest.raises(ValueError):
        dataclasses.replace(FluidParams(), dt=0.0).validate()
    with pytest.raises(ValueError):
        dataclasses.replace(FluidParams(), scorr_dq_ratio=1.5).validate()
