"""Position-based fluid solver with an embedded suction nozzle.

One call to :func:`step` advances the particle system by ``dt``: gravity,
position prediction, a single neighbour search, then ``solver_iterations``
passes of density projection + suction + boundary collision, and finally the
velocity/position commit and removal of particles lifted to ``y_goal``.

Every sub-step goes through :func:`suction_mpc.tape.record`, so the same code
path produces a differentiable record when a tape is supplied.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .kernels import poly6_dr2_nb, poly6_nb, spiky_mag_deriv_nb, spiky_mag_nb
from .neighbors import build_neighbors
from .suction import apply_suction, suction_vjp
from .tape import record, value


class SimulationError(RuntimeError):
    """Non-finite particle state; carries the offending particle id and sub-step."""

    def __init__(self, particle, substep, message=None):
        self.particle = particle
        self.substep = substep
        super().__init__(message or f"non-finite state for particle {particle} after {substep}")


@dataclass
class ParticleSystem:
    positions: np.ndarray  # (n, 3) cm
    velocities: np.ndarray  # (n, 3) cm/s
    active: np.ndarray  # (n,) bool
    capacity: int

    @classmethod
    def empty(cls, capacity):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=bool), int(capacity))

    @classmethod
    def from_positions(cls, positions, velocities=None, capacity=None):
        x = np.array(positions, dtype=np.float64).reshape(-1, 3)
        v = np.zeros_like(x) if velocities is None else np.array(velocities, dtype=np.float64).reshape(-1, 3)
        return cls(x, v, np.ones(len(x), dtype=bool), len(x) if capacity is None else int(capacity))

    def __len__(self):
        return len(self.positions)

    @property
    def n_active(self):
        return int(np.count_nonzero(self.active))

    def copy(self):
        return ParticleSystem(self.positions.copy(), self.velocities.copy(), self.active.copy(), self.capacity)

    def active_positions(self):
        return self.positions[self.active]

    def count_below(self, y_goal):
        return int(np.count_nonzero(self.active & (self.positions[:, 1] < y_goal)))

    def compact(self):
        """Drop inactive rows, keeping the order of the active ones."""
        if self.active.all():
            return self
        keep = self.active
        return ParticleSystem(self.positions[keep], self.velocities[keep], self.active[keep], self.capacity)


# ---------------------------------------------------------------------------
# rest density

@functools.lru_cache(maxsize=32)
def calibrate_rest_density(h, spacing):
    """Density at a site of an infinite cubic lattice with the given spacing (unit mass)."""
    k = int(math.ceil(h / spacing))
    g = np.arange(-k, k + 1) * spacing
    r2 = (g[:, None, None] ** 2 + g[None, :, None] ** 2 + g[None, None, :] ** 2).ravel()
    return float(sum(poly6_nb(float(s), float(h)) for s in np.sort(r2)))


def rest_density(params):
    if params.rest_density is not None:
        return float(params.rest_density)
    return calibrate_rest_density(float(params.kernel_radius), float(params.rest_spacing))


# ---------------------------------------------------------------------------
# density constraint: compiled per-pair loops over a CSR neighbour table

@njit(cache=True)
def _lambda_kernel(p, offs, nbr, h, rho0, eps):
    n = p.shape[0]
    lam = np.empty(n)
    rho = np.empty(n)
    S = np.empty(n)
    G = np.zeros((n, 3))
    w0 = poly6_nb(0.0, h)
    for i in range(n):
        dens = w0
        sq = 0.0
        g0 = 0.0
        g1 = 0.0
        g2 = 0.0
        for s in range(offs[i], offs[i + 1]):
            j = nbr[s]
            r0 = p[i, 0] - p[j, 0]
            r1 = p[i, 1] - p[j, 1]
            r2 = p[i, 2] - p[j, 2]
            d2 = r0 * r0 + r1 * r1 + r2 * r2
            dens += poly6_nb(d2, h)
            dist = math.sqrt(d2)
            m = spiky_mag_nb(dist, h)
            if m != 0.0:
                c = m / dist
                a0 = c * r0
                a1 = c * r1
                a2 = c * r2
                g0 += a0
                g1 += a1
                g2 += a2
                sq += a0 * a0 + a1 * a1 + a2 * a2
        G[i, 0] = g0
        G[i, 1] = g1
        G[i, 2] = g2
        rho[i] = dens
        S[i] = (g0 * g0 + g1 * g1 + g2 * g2 + sq) / (rho0 * rho0)
        lam[i] = -(dens / rho0 - 1.0) / (S[i] + eps)
    return lam, rho, S, G


@njit(cache=True, inline="always")
def _spiky_jvp(r0, r1, r2, dist, h, b0, b1, b2):
    """J^T b for g(r) = m(|r|) r / |r| (J is symmetric)."""
    m = spiky_mag_nb(dist, h)
    if m == 0.0:
        return 0.0, 0.0, 0.0
    mp = spiky_mag_deriv_nb(dist, h)
    u0 = r0 / dist
    u1 = r1 / dist
    u2 = r2 / dist
    ub = u0 * b0 + u1 * b1 + u2 * b2
    t = m / dist
    c = mp * ub - t * ub
    return t * b0 + c * u0, t * b1 + c * u1, t * b2 + c * u2


@njit(cache=True)
def _lambda_vjp_kernel(p, offs, nbr, h, rho0, eps, lam, S, G, lam_bar):
    n = p.shape[0]
    pbar = np.zeros((n, 3))
    inv2 = 1.0 / (rho0 * rho0)
    for i in range(n):
        lb = lam_bar[i]
        if lb == 0.0:
            continue
        denom = S[i] + eps
        rho_bar = -lb / denom / rho0
        S_bar = -lb * lam[i] / denom
        for s in range(offs[i], offs[i + 1]):
            j = nbr[s]
            r0 = p[i, 0] - p[j, 0]
            r1 = p[i, 1] - p[j, 1]
            r2 = p[i, 2] - p[j, 2]
            d2 = r0 * r0 + r1 * r1 + r2 * r2
            dist = math.sqrt(d2)
            dw = 2.0 * rho_bar * poly6_dr2_nb(d2, h)
            q0 = dw * r0
            q1 = dw * r1
            q2 = dw * r2
            m = spiky_mag_nb(dist, h)
            if m != 0.0:
                c = m / dist
                f = 2.0 * S_bar * inv2
                b0 = f * (G[i, 0] + c * r0)
                b1 = f * (G[i, 1] + c * r1)
                b2 = f * (G[i, 2] + c * r2)
                j0, j1, j2 = _spiky_jvp(r0, r1, r2, dist, h, b0, b1, b2)
                q0 += j0
                q1 += j1
                q2 += j2
            pbar[i, 0] += q0
            pbar[i, 1] += q1
            pbar[i, 2] += q2
            pbar[j, 0] -= q0
            pbar[j, 1] -= q1
            pbar[j, 2] -= q2
    return pbar


@njit(cache=True)
def _correction_kernel(p, offs, nbr, lam, h, rho0, k, nexp, dq):
    n = p.shape[0]
    dx = np.zeros((n, 3))
    w_dq = poly6_nb(dq * dq, h)
    for i in range(n):
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        for s in range(offs[i], offs[i + 1]):
            j = nbr[s]
            r0 = p[i, 0] - p[j, 0]
            r1 = p[i, 1] - p[j, 1]
            r2 = p[i, 2] - p[j, 2]
            d2 = r0 * r0 + r1 * r1 + r2 * r2
            dist = math.sqrt(d2)
            m = spiky_mag_nb(dist, h)
            if m == 0.0:
                continue
            sc = -k * (poly6_nb(d2, h) / w_dq) ** nexp
            c = (lam[i] + lam[j] + sc) * m / dist
            a0 += c * r0
            a1 += c * r1
            a2 += c * r2
        # the kernel gradient is the negative of the radial spiky term
        dx[i, 0] = -a0 / rho0
        dx[i, 1] = -a1 / rho0
        dx[i, 2] = -a2 / rho0
    return dx


@njit(cache=True)
def _correction_vjp_kernel(p, offs, nbr, lam, h, rho0, k, nexp, dq, dx_bar):
    n = p.shape[0]
    pbar = np.zeros((n, 3))
    lam_bar = np.zeros(n)
    w_dq = poly6_nb(dq * dq, h)
    for i in range(n):
        e0 = -dx_bar[i, 0] / rho0
        e1 = -dx_bar[i, 1] / rho0
        e2 = -dx_bar[i, 2] / rho0
        if e0 == 0.0 and e1 == 0.0 and e2 == 0.0:
            continue
        for s in range(offs[i], offs[i + 1]):
            j = nbr[s]
            r0 = p[i, 0] - p[j, 0]
            r1 = p[i, 1] - p[j, 1]
            r2 = p[i, 2] - p[j, 2]
            d2 = r0 * r0 + r1 * r1 + r2 * r2
            dist = math.sqrt(d2)
            m = spiky_mag_nb(dist, h)
            if m == 0.0:
                continue
            ratio = poly6_nb(d2, h) / w_dq
            sc = -k * ratio ** nexp
            coef = lam[i] + lam[j] + sc
            c = m / dist
            # adjoint of the scalar coefficient
            abar = c * (r0 * e0 + r1 * e1 + r2 * e2)
            lam_bar[i] += abar
            lam_bar[j] += abar
            q0, q1, q2 = _spiky_jvp(r0, r1, r2, dist, h, coef * e0, coef * e1, coef * e2)
            if ratio > 0.0:
                dsc = -k * nexp * ratio ** (nexp - 1) / w_dq * 2.0 * poly6_dr2_nb(d2, h) * abar
                q0 += dsc * r0
                q1 += dsc * r1
                q2 += dsc * r2
            pbar[i, 0] += q0
            pbar[i, 1] += q1
            pbar[i, 2] += q2
            pbar[j, 0] -= q0
            pbar[j, 1] -= q1
            pbar[j, 2] -= q2
    return pbar, lam_bar


def compute_lambdas(p, table, rho0, params):
    """Constraint multipliers for the rows of ``table`` at compact positions ``p``."""
    lam, _, _, _ = _lambda_kernel(np.ascontiguousarray(p), table.offsets, table.indices,
                                  float(params.kernel_radius), float(rho0), float(params.cfm_epsilon))
    return lam


def compute_lambda(i, system, table, params, rho0=None):
    """Multiplier of global particle ``i``; ``table`` must cover the active particles."""
    rho0 = rest_density(params) if rho0 is None else rho0
    row = int(np.flatnonzero(table.particles == i)[0])
    p = system.positions[table.particles]
    return float(compute_lambdas(p, table, rho0, params)[row])


def density_corrections(p, table, lam, rho0, params):
    h = float(params.kernel_radius)
    return _correction_kernel(np.ascontiguousarray(p), table.offsets, table.indices, np.asarray(lam, dtype=float),
                              h, float(rho0), float(params.scorr_k), int(params.scorr_n),
                              float(params.scorr_dq_ratio) * h)


def solve_density_constraint(system, table, lam, params, rho0=None):
    """Full-length correction array; ``lam`` holds one multiplier per table row.

    Particles outside ``table`` receive zero.
    """
    rho0 = rest_density(params) if rho0 is None else rho0
    out = np.zeros_like(system.positions)
    p = system.positions[table.particles]
    out[table.particles] = density_corrections(p, table, lam, rho0, params)
    return out


def density_error(p, table, rho0, params):
    """Per-row ``rho / rho0 - 1``."""
    _, rho, _, _ = _lambda_kernel(np.ascontiguousarray(p), table.offsets, table.indices,
                                  float(params.kernel_radius), float(rho0), float(params.cfm_epsilon))
    return rho / rho0 - 1.0


# ---------------------------------------------------------------------------
# boundary

@njit(cache=True)
def _project_kernel(q, lo, hi, obs_lo, obs_hi, usable):
    n = q.shape[0]
    p = q.copy()
    clamped = np.zeros((n, 3), dtype=np.bool_)
    for i in range(n):
        for a in range(3):
            if p[i, a] < lo[a]:
                p[i, a] = lo[a]
                clamped[i, a] = True
            elif p[i, a] > hi[a]:
                p[i, a] = hi[a]
                clamped[i, a] = True
        for b in range(obs_lo.shape[0]):
            inside = True
            for a in range(3):
                if not (p[i, a] > obs_lo[b, a] and p[i, a] < obs_hi[b, a]):
                    inside = False
                    break
            if not inside:
                continue
            best = np.inf
            face = -1
            for f in range(6):
                if not usable[b, f]:
                    continue
                a = f // 2
                depth = p[i, a] - obs_lo[b, a] if f % 2 == 0 else obs_hi[b, a] - p[i, a]
                if depth < best:
                    best = depth
                    face = f
            if face >= 0:
                a = face // 2
                p[i, a] = obs_lo[b, a] if face % 2 == 0 else obs_hi[b, a]
                clamped[i, a] = True
    return p, clamped


@functools.lru_cache(maxsize=64)
def _boundary_arrays(container, obstacles, open_top, margin):
    lo = np.asarray(container.lo, dtype=float) + margin
    hi = np.asarray(container.hi, dtype=float) - margin
    if open_top:
        hi[1] = np.inf
    k = len(obstacles)
    obs_lo = np.zeros((k, 3))
    obs_hi = np.zeros((k, 3))
    usable = np.zeros((k, 6), dtype=np.bool_)
    for b, box in enumerate(obstacles):
        obs_lo[b] = np.asarray(box.lo) - margin
        obs_hi[b] = np.asarray(box.hi) + margin
        # exit faces flush with the container walls cannot be used
        usable[b, 0::2] = np.asarray(box.lo) > np.asarray(container.lo)
        usable[b, 1::2] = np.asarray(box.hi) < np.asarray(container.hi)
        if open_top:
            usable[b, 3] = True
    return lo, hi, obs_lo, obs_hi, usable


def project_points(q, scene, margin=None):
    """Nearest-interior-point projection; returns ``(points, clamped)``.

    Points are first clamped into the container (``margin`` inside its walls,
    no ceiling when the top is open) and then pushed out of each obstacle
    through the nearest usable face. ``clamped`` marks coordinates replaced
    by a wall value; the projection has zero derivative there.
    """
    margin = scene.fluid.boundary_margin if margin is None else margin
    arrays = _boundary_arrays(scene.container, scene.obstacles, scene.open_top, float(margin))
    return _project_kernel(np.ascontiguousarray(q, dtype=np.float64).reshape(-1, 3), *arrays)


def boundary_project(x, scene):
    """Project a single point (or an array of points) to the fluid domain."""
    x = np.asarray(x, dtype=float)
    out, _ = project_points(x.reshape(-1, 3), scene)
    return out.reshape(x.shape)


# ---------------------------------------------------------------------------
# emission and removal

def emission_rows(system, scene, step_index, seed):
    """Positions and velocities of the particles emitted at ``step_index``."""
    em = scene.emission
    count = max(0, min(int(em.rate), system.capacity - system.n_active))
    if count == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(step_index)])
    direction = rng.normal(size=(count, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = em.jitter * rng.random(count) ** (1.0 / 3.0)
    x = np.asarray(em.point, dtype=float) + radius[:, None] * direction
    x, _ = project_points(x, scene)
    v = np.repeat((em.speed * np.asarray(em.direction, dtype=float))[None, :], count, axis=0)
    return x, v


def emit_particles(system, scene, step_index, seed=0):
    """Add up to ``emission.rate`` particles without exceeding ``system.capacity`` active ones.

    Inactive rows are dropped first, so removed particles free their slots.
    """
    system = system.compact()
    x, v = emission_rows(system, scene, step_index, seed)
    if len(x) == 0:
        return system
    return ParticleSystem(
        np.concatenate([system.positions, x]),
        np.concatenate([system.velocities, v]),
        np.concatenate([system.active, np.ones(len(x), dtype=bool)]),
        system.capacity,
    )


def deactivate_lifted(system, y_goal):
    """Deactivate active particles with ``y >= y_goal``; returns ``(system, removed)``."""
    lifted = system.active & (system.positions[:, 1] >= y_goal)
    removed = int(np.count_nonzero(lifted))
    if removed == 0:
        return system, 0
    return ParticleSystem(system.positions, system.velocities, system.active & ~lifted, system.capacity), removed


# ---------------------------------------------------------------------------
# the simulation step

def _check_finite(p, ids, substep):
    if not np.isfinite(p).all():
        bad = int(np.flatnonzero(~np.isfinite(p).all(axis=1))[0])
        raise SimulationError(int(ids[bad]), substep)


def step_handles(x, v, nozzle, active, scene, tape=None, rho0=None, trace=None):
    """Advance position/velocity handles by one step.

    ``x``, ``v`` and ``nozzle`` are arrays (untaped) or tape nodes. Returns
    ``(x_new, v_new, active_new)``; the active mask is a plain array.
    ``nozzle=None`` runs the step without suction. When ``trace`` is a list,
    the discrete structure of the step (neighbour table, clamped coordinates)
    is appended to it.
    """
    fp = scene.fluid
    dt = float(fp.dt)
    h = float(fp.kernel_radius)
    rho0 = rest_density(fp) if rho0 is None else rho0
    eps = float(fp.cfm_epsilon)
    k, nexp, dq = float(fp.scorr_k), int(fp.scorr_n), float(fp.scorr_dq_ratio) * h
    gravity = np.asarray(scene.gravity, dtype=float)
    up = np.asarray(scene.up, dtype=float)
    sp = scene.suction
    ids = np.flatnonzero(active)

    def grav_fwd(v_):
        out = v_.copy()
        out[ids] += dt * gravity
        return out, None

    v1 = record(tape, "gravity", grav_fwd, lambda g, c, v_: (g,), v)

    def predict_fwd(x_, v_):
        return x_[ids] + dt * v_[ids], None

    def predict_vjp(g, c, x_, v_):
        xb = np.zeros_like(x_)
        vb = np.zeros_like(v_)
        xb[ids] = g
        vb[ids] = dt * g
        return xb, vb

    pk = record(tape, "predict", predict_fwd, predict_vjp, x, v1)
    _check_finite(value(pk), ids, "predict")
    table = build_neighbors(value(pk), h, ids)
    offs, nbr = table.offsets, table.indices
    if trace is not None:
        trace.append(table.offsets)
        trace.append(table.indices)

    def lambda_fwd(p_):
        lam, rho, S, G = _lambda_kernel(p_, offs, nbr, h, rho0, eps)
        return lam, (lam, S, G)

    def lambda_vjp(g, cache, p_):
        lam, S, G = cache
        return (_lambda_vjp_kernel(p_, offs, nbr, h, rho0, eps, lam, S, G, g),)

    def corr_fwd(p_, lam_):
        return _correction_kernel(p_, offs, nbr, lam_, h, rho0, k, nexp, dq), None

    def corr_vjp(g, c, p_, lam_):
        return _correction_vjp_kernel(p_, offs, nbr, lam_, h, rho0, k, nexp, dq, g)

    def suction_fwd(p_, e_):
        return apply_suction(p_, e_, up, sp), None

    def suction_bwd(g, c, p_, e_):
        return suction_vjp(g, p_, e_, up, sp)

    def update_fwd(p_, dx_, s_):
        return project_points(p_ + dx_ + s_, scene)

    def update_vjp(g, clamped, p_, dx_, s_):
        q = np.where(clamped, 0.0, g)
        return q, q, q

    for it in range(fp.solver_iterations):
        lam = record(tape, "lambda", lambda_fwd, lambda_vjp, pk)
        dx = record(tape, "correction", corr_fwd, corr_vjp, pk, lam)
        if nozzle is None:
            s = record(tape, "suction", lambda p_: (np.zeros_like(p_), None), lambda g, c, p_: (None,), pk)
        else:
            s = record(tape, "suction", suction_fwd, suction_bwd, pk, nozzle)
        if trace is not None:
            trace.append(update_fwd(value(pk), value(dx), value(s))[1])
        pk = record(tape, "update", update_fwd, update_vjp, pk, dx, s)
        _check_finite(value(pk), ids, f"solver iteration {it}")

    def velocity_fwd(p_, x_, v_):
        out = v_.copy()
        out[ids] = (p_ - x_[ids]) / dt
        return out, None

    def velocity_vjp(g, c, p_, x_, v_):
        xb = np.zeros_like(x_)
        xb[ids] = -g[ids] / dt
        vb = g.copy()
        vb[ids] = 0.0
        return g[ids] / dt, xb, vb

    def commit_fwd(p_, x_):
        out = x_.copy()
        out[ids] = p_
        return out, None

    def commit_vjp(g, c, p_, x_):
        xb = g.copy()
        xb[ids] = 0.0
        return g[ids], xb

    v_new = record(tape, "velocity", velocity_fwd, velocity_vjp, pk, x, v1)
    x_new = record(tape, "commit", commit_fwd, commit_vjp, pk, x)
    active_new = active & ~(value(x_new)[:, 1] >= scene.y_goal)
    return x_new, v_new, active_new


def step(system, nozzle, scene, tape=None, rho0=None):
    """One simulation step with the nozzle at ``nozzle``; returns the new system.

    With a tape, the positions/velocities/nozzle are registered as leaves and
    the sub-steps recorded; the resulting system holds plain arrays either way.
    """
    x, v = system.positions, system.velocities
    e = None if nozzle is None else np.asarray(nozzle, dtype=float)
    if tape is not None:
        x, v = tape.leaf("positions", x), tape.leaf("velocities", v)
        if e is not None:
            e = tape.leaf("control", e)
    x_new, v_new, active = step_handles(x, v, e, system.active, scene, tape, rho0)
    return ParticleSystem(value(x_new), value(v_new), active, system.capacity)
