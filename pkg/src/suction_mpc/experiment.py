"""Experiment harness: warm-up, policy rollout, and the files each run writes."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .autodiff import compare_gradients, finite_difference_gradient, loss_and_gradient
from .control import MpcConfig, MpcController, Policy, baseline_control, select_initial_point
from .fluid import ParticleSystem, emit_particles, step
from .metrics import RunResult, record_curve, trajectory_length
from .scenes import (Box, EmissionSpec, FluidParams, Scene, desk_scale, emission_sweep, load_scene,
                     preset, scene_to_dict)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    scene: Scene
    scene_source: str = "preset:case1"
    policy: Policy = Policy("mpc")
    mpc: MpcConfig = MpcConfig()
    seed: int = 0
    steps: int | None = None  # total steps including warm-up; default warm-up + 1000
    out: str = "results"

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit value")
        if self.steps is not None and self.steps < self.scene.warmup_steps:
            raise ConfigError("steps must be >= the scene's warm-up steps")
        self.mpc.validate()

    @property
    def total_steps(self):
        return self.scene.warmup_steps + 1000 if self.steps is None else self.steps

    def to_dict(self):
        return {
            "scene": scene_to_dict(self.scene),
            "scene_source": self.scene_source,
            "policy": dataclasses.asdict(self.policy),
            "mpc": dataclasses.asdict(self.mpc),
            "seed": self.seed,
            "steps": self.total_steps,
        }

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def resolve_scene(preset_name=None, scene_path=None, desk=None):
    if preset_name and scene_path:
        raise ConfigError("give either a preset or a scene file, not both")
    if scene_path:
        scene = load_scene(Path(scene_path).read_text())
        source = f"file:{scene_path}"
    else:
        name = preset_name or "case1"
        scene = preset(name)
        source = f"preset:{name}"
    if desk:
        scene = desk_scale(scene, **({} if desk is True else desk))
        source += "+desk"
    return scene, source


def _with_fluid(scene, overrides):
    if not overrides:
        return scene
    names = {f.name for f in dataclasses.fields(FluidParams)}
    bad = set(overrides) - names
    if bad:
        raise ConfigError(f"fluid: unknown key {sorted(bad)[0]!r}")
    fluid = dataclasses.replace(scene.fluid, **overrides).validate()
    return dataclasses.replace(scene, fluid=fluid)


def build_config(preset_name=None, scene_path=None, policy=None, seed=None, steps=None, out=None,
                 config_path=None, desk=None):
    """Merge preset defaults, command-line values and an optional YAML config file (highest priority)."""
    values = {"preset": preset_name, "scene": scene_path, "policy": policy, "seed": seed, "steps": steps,
              "out": out, "desk_scale": desk, "fluid": None, "mpc": None}
    if config_path is not None:
        try:
            data = yaml.safe_load(Path(config_path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        unknown = set(data) - set(values)
        if unknown:
            raise ConfigError(f"config: unknown key {sorted(unknown)[0]!r}")
        if "preset" in data or "scene" in data:
            values["preset"] = values["scene"] = None
        values.update({k: v for k, v in data.items() if v is not None})
    try:
        scene, source = resolve_scene(values["preset"], values["scene"], values["desk_scale"])
        scene = _with_fluid(scene, values["fluid"])
        mpc = MpcConfig(**(values["mpc"] or {}))
        pol = values["policy"] or "mpc"
        pol = Policy.parse(pol) if isinstance(pol, str) else Policy(**pol)
        cfg = ExperimentConfig(
            scene=scene, scene_source=source, policy=pol, mpc=mpc,
            seed=int(values["seed"] or 0),
            steps=None if values["steps"] is None else int(values["steps"]),
            out=str(values["out"] or "results"),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError, OSError) as exc:  # SceneError is a ValueError
        raise ConfigError(str(exc)) from None
    if pol.path_index >= len(scene.flow_paths):
        raise ConfigError(f"policy path index {pol.path_index} out of range")
    return cfg


# -- episodes ---------------------------------------------------------------

@dataclass
class Episode:
    """State log of one run: counts below the goal from ``t0`` on and the executed nozzle path."""

    t0: int
    counts: list
    controls: np.ndarray
    initial_point: np.ndarray | None = None
    start_counts: list = field(default_factory=list)
    mpc_losses: list = field(default_factory=list)
    wall_time: float = 0.0


def warm_up(scene, seed):
    system = ParticleSystem.empty(scene.max_particles)
    for t in range(scene.warmup_steps):
        system = emit_particles(system, scene, t, seed)
        system = step(system, None, scene)
    return system


def run_episode(scene, policy, seed=0, total_steps=None, mpc=None, progress=None, system=None):
    """Warm up, then drive the nozzle with ``policy`` until ``total_steps``.

    Returns an :class:`Episode`. ``controls`` holds the nozzle position
    before the first controlled step followed by one row per executed step.
    """
    mpc = mpc or MpcConfig()
    t0 = scene.warmup_steps
    total = t0 + 1000 if total_steps is None else int(total_steps)
    started = time.perf_counter()
    if system is None:
        system = warm_up(scene, seed)
    ep = Episode(t0=t0, counts=[system.count_below(scene.y_goal)], controls=np.zeros((0, 3)))
    if policy.kind == "mpc":
        start, details = select_initial_point(system, scene, mpc, seed, t0, return_details=True)
        ep.initial_point, ep.start_counts = start, list(details["counts"])
        controller = MpcController(scene, mpc, start, seed)

        def control(sys_, t):
            return controller(sys_, t)
    else:
        start = baseline_control(policy, 0, scene)

        def control(sys_, t):
            return baseline_control(policy, t - t0, scene)
    path = [np.asarray(start, dtype=float)]
    for t in range(t0, total):
        system = emit_particles(system, scene, t, seed)
        u = control(system, t)
        system = step(system, u, scene)
        path.append(np.asarray(u, dtype=float))
        ep.counts.append(system.count_below(scene.y_goal))
        if progress is not None and (t - t0) % 100 == 0:
            progress(f"step {t}: {ep.counts[-1]} particles below goal")
    ep.controls = np.array(path)
    if policy.kind == "mpc":
        ep.mpc_losses = [d.losses for d in controller.history]
    ep.wall_time = time.perf_counter() - started
    return ep


def episode_result(ep, policy, seed, config_hash=""):
    curve = record_curve(ep.counts, ep.t0)
    extra = {}
    if ep.initial_point is not None:
        extra["initial_point"] = [float(c) for c in ep.initial_point]
        extra["start_counts"] = ep.start_counts
    return RunResult.from_run(curve, ep.controls, policy.label, seed, config_hash, extra)


def trajectory_csv(controls, t0):
    buf = io.StringIO()
    buf.write("step,x,y,z\n")
    for k, (x, y, z) in enumerate(np.asarray(controls, dtype=float).tolist()):
        buf.write(f"{t0 + k},{x!r},{y!r},{z!r}\n")
    return buf.getvalue()


def _write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def run_simulate(cfg, progress=None):
    """Run one episode and write ``<stem>_curve.csv``, ``<stem>_result.json`` and ``<stem>_trajectory.csv``."""
    ep = run_episode(cfg.scene, cfg.policy, cfg.seed, cfg.total_steps, cfg.mpc, progress)
    result = episode_result(ep, cfg.policy, cfg.seed, cfg.config_hash())
    out = Path(cfg.out)
    stem = f"{cfg.policy.label.replace(':', '-')}_seed{cfg.seed}"
    files = {
        "curve": out / f"{stem}_curve.csv",
        "result": out / f"{stem}_result.json",
        "trajectory": out / f"{stem}_trajectory.csv",
    }
    _write(files["curve"], result.curve.to_csv())
    _write(files["result"], result.to_json())
    _write(files["trajectory"], trajectory_csv(ep.controls, ep.t0))
    return result, files


SWEEP_COLUMNS = ["emission_x", "emission_z", "trajectory_length", "tau60", "error"]


def run_sweep(cfg, spacing, progress=None):
    """One MPC episode per perimeter emission point; writes ``sweep.csv`` and one trajectory file per point."""
    points, skipped = emission_sweep(cfg.scene, spacing)
    for sp in skipped:
        log.warning("sweep point %s on %s lies inside an obstacle; skipped", sp.emission.point, sp.side)
    out = Path(cfg.out)
    rows = []
    mpc_policy = Policy("mpc")
    for k, sp in enumerate(points):
        if progress is not None:
            progress(f"sweep point {k + 1}/{len(points)} at {sp.emission.point}")
        x, _, z = sp.emission.point
        try:
            scene = cfg.scene.with_emission(sp.emission)
            ep = run_episode(scene, mpc_policy, cfg.seed, cfg.total_steps, cfg.mpc)
            res = episode_result(ep, mpc_policy, cfg.seed)
            _write(out / f"sweep_{k:02d}_trajectory.csv", trajectory_csv(ep.controls, ep.t0))
            rows.append([x, z, res.trajectory_length, res.tau60, ""])
        except (ArithmeticError, RuntimeError, ValueError) as exc:
            rows.append([x, z, None, None, f"{type(exc).__name__}: {exc}"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for x, z, length, tau, err in rows:
        w.writerow([repr(x), repr(z), "" if length is None else repr(length), "" if tau is None else tau, err])
    _write(out / "sweep.csv", buf.getvalue())
    meta = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "spacing": spacing,
            "skipped": [list(sp.emission.point) for sp in skipped]}
    _write(out / "sweep.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return rows, points


# -- gradient check -----------------------------------------------------------

def toy_scene(n_particles=80):
    """Small closed box for gradient checks; no obstacles, no emission."""
    return Scene(
        container=Box((0.0, 0.0, 0.0), (12.0, 4.0, 12.0)),
        emission=EmissionSpec(point=(6.0, 1.0, 6.0), direction=(1.0, 0.0, 0.0), rate=0),
        flow_paths=(((1.0, 1.0, 1.0), (11.0, 1.0, 11.0)),),
        warmup_steps=0,
        max_particles=max(1, int(n_particles)),
        name="toy",
    )


def toy_problem(seed=0, n_particles=None, horizon=None):
    """Random cloud of 50-100 particles on a box floor with a nozzle trajectory near its edge."""
    rng = np.random.default_rng([int(seed), 7])
    n = int(rng.integers(50, 101)) if n_particles is None else int(n_particles)
    h = int(rng.integers(3, 6)) if horizon is None else int(horizon)
    scene = toy_scene(n)
    x = np.column_stack([rng.uniform(4.0, 8.0, n), rng.uniform(0.05, 1.5, n), rng.uniform(4.0, 8.0, n)])
    v = rng.normal(0.0, 5.0, (n, 3))
    system = ParticleSystem.from_positions(x, v, capacity=n)
    base = np.array([rng.uniform(7.0, 9.0), rng.uniform(1.5, 3.0), rng.uniform(7.0, 9.0)])
    controls = base + np.cumsum(rng.normal(0.0, 0.03, (h, 3)), axis=0)
    return system, controls, scene


def run_gradcheck(seed=0, delta=1e-4, threshold=1e-3, corrupt=False, n_particles=None, horizon=None):
    """Adjoint vs central differences on a toy problem; returns a GradientReport.

    ``corrupt`` flips the sign of one adjoint component; it exists so the
    failure path can be exercised.
    """
    system, controls, scene = toy_problem(seed, n_particles, horizon)
    _, g = loss_and_gradient(system, controls, scene)
    fd, used = finite_difference_gradient(system, controls, scene, delta=delta)
    if corrupt:
        g = g.copy()
        k = np.unravel_index(int(np.argmax(np.abs(g))), g.shape)
        g[k] = -g[k] if g[k] != 0 else 1.0
    report = compare_gradients(g, fd, used, threshold=threshold)
    return report


__all__ = [
    "ConfigError", "ExperimentConfig", "Episode", "build_config", "resolve_scene", "warm_up", "run_episode",
    "episode_result", "run_simulate", "run_sweep", "run_gradcheck", "toy_problem", "toy_scene",
    "trajectory_csv", "trajectory_length",
]
