"""Cavity scenes: geometry, emission, presets and the perimeter emission sweep.

Scenes are stored as YAML documents with a ``schema_version`` field; the
format is documented in ``docs/scene-config.md``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np
import yaml

SCHEMA_VERSION = 1


class SceneError(ValueError):
    """Invalid scene: ``field`` names the offending entry (e.g. ``emission.point``)."""

    def __init__(self, field_name, message, line=None):
        self.field = field_name
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{field_name}: {message}")


Vec = tuple  # (x, y, z) floats


def _vec(value, name):
    try:
        v = tuple(float(c) for c in value)
    except (TypeError, ValueError):
        raise SceneError(name, f"expected three numbers, got {value!r}") from None
    if len(v) != 3:
        raise SceneError(name, f"expected three numbers, got {len(v)}")
    if not all(math.isfinite(c) for c in v):
        raise SceneError(name, "components must be finite")
    return v


@dataclass(frozen=True)
class Box:
    lo: Vec
    hi: Vec

    def contains(self, p, strict=True):
        p = np.asarray(p, dtype=float)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        if strict:
            return bool(np.all(p > lo) and np.all(p < hi))
        return bool(np.all(p >= lo) and np.all(p <= hi))


@dataclass(frozen=True)
class FluidParams:
    dt: float = 0.01
    kernel_radius: float = 1.0
    rest_spacing: float = 0.5
    rest_density: float | None = None  # None: calibrate from rest_spacing
    solver_iterations: int = 4
    cfm_epsilon: float = 100.0
    scorr_k: float = 0.1
    scorr_n: int = 4
    scorr_dq_ratio: float = 0.3
    boundary_margin: float = 0.01

    def validate(self):
        if not self.dt > 0:
            raise SceneError("fluid.dt", "must be > 0")
        if not self.kernel_radius > 0:
            raise SceneError("fluid.kernel_radius", "must be > 0")
        if not self.rest_spacing > 0:
            raise SceneError("fluid.rest_spacing", "must be > 0")
        if self.rest_density is not None and not self.rest_density > 0:
            raise SceneError("fluid.rest_density", "must be > 0")
        if self.solver_iterations < 1:
            raise SceneError("fluid.solver_iterations", "must be >= 1")
        if not self.cfm_epsilon > 0:
            raise SceneError("fluid.cfm_epsilon", "must be > 0")
        if not 0 < self.scorr_dq_ratio < 1:
            raise SceneError("fluid.scorr_dq_ratio", "must lie in (0, 1)")
        if self.boundary_margin < 0:
            raise SceneError("fluid.boundary_margin", "must be >= 0")


@dataclass(frozen=True)
class SuctionParams:
    strength: float = 100.0
    sigma_x: float = math.sqrt(0.5)
    sigma_z: float = math.sqrt(0.5)
    softening: float = 0.1
    dist_floor: float = 1e-6

    def validate(self):
        for name in ("strength", "sigma_x", "sigma_z", "softening"):
            if not getattr(self, name) > 0:
                raise SceneError(f"suction.{name}", "must be > 0")
        if self.dist_floor < 0:
            raise SceneError("suction.dist_floor", "must be >= 0")


@dataclass(frozen=True)
class EmissionSpec:
    point: Vec
    direction: Vec
    rate: int = 4
    speed: float = 20.0
    jitter: float = 0.2


@dataclass(frozen=True)
class Scene:
    container: Box
    emission: EmissionSpec
    flow_paths: tuple
    obstacles: tuple = ()
    open_top: bool = True
    up: Vec = (0.0, 1.0, 0.0)
    gravity: Vec = (0.0, -981.0, 0.0)
    y_goal: float = 10.0
    warmup_steps: int = 200
    max_particles: int = 2000
    nozzle_height: float = 1.0
    nozzle_clearance: float = 0.5
    fluid: FluidParams = field(default_factory=FluidParams)
    suction: SuctionParams = field(default_factory=SuctionParams)
    name: str = ""

    # -- geometry helpers -------------------------------------------------
    @property
    def floor(self):
        return self.container.lo[1]

    def inside(self, p):
        """True when ``p`` is strictly inside the container and outside every obstacle."""
        p = np.asarray(p, dtype=float)
        hi = np.array(self.container.hi, dtype=float)
        if self.open_top:
            hi[1] = np.inf
        if not (np.all(p > np.asarray(self.container.lo)) and np.all(p < hi)):
            return False
        return not any(b.contains(p, strict=False) for b in self.obstacles)

    def nozzle_bounds(self):
        """Axis-aligned box the nozzle is confined to."""
        lo = np.array(self.container.lo, dtype=float)
        hi = np.array(self.container.hi, dtype=float)
        lo[1] = self.floor + self.nozzle_clearance
        hi[1] = self.y_goal
        return lo, hi

    def midpoint(self, path_index=0):
        """Arc-length midpoint of a flow path."""
        pts = np.asarray(self.flow_paths[path_index], dtype=float)
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        half = seg.sum() / 2.0
        acc = 0.0
        for k, s in enumerate(seg):
            if acc + s >= half and s > 0:
                return pts[k] + (half - acc) / s * (pts[k + 1] - pts[k])
            acc += s
        return pts[-1].copy()

    def path_end(self, path_index=0):
        return np.asarray(self.flow_paths[path_index][-1], dtype=float)

    def with_emission(self, emission):
        return validate_scene(replace(self, emission=emission))

    def scaled(self, max_particles, rate=None):
        """Copy with a different particle budget (desk-scale runs)."""
        em = self.emission if rate is None else replace(self.emission, rate=int(rate))
        return validate_scene(replace(self, max_particles=int(max_particles), emission=em))


def validate_scene(scene):
    c = scene.container
    if not all(h > l for l, h in zip(c.lo, c.hi)):
        raise SceneError("container", "max must exceed min on every axis")
    for k, box in enumerate(scene.obstacles):
        if not all(h > l for l, h in zip(box.lo, box.hi)):
            raise SceneError(f"obstacles[{k}]", "max must exceed min on every axis")
        if not (all(bl >= cl for bl, cl in zip(box.lo, c.lo)) and all(bh <= ch for bh, ch in zip(box.hi, c.hi))):
            raise SceneError(f"obstacles[{k}]", "obstacle must lie within the container")
    if abs(np.linalg.norm(scene.up) - 1.0) > 1e-9:
        raise SceneError("up", "must be a unit vector")
    em = scene.emission
    if not scene.inside(em.point):
        raise SceneError("emission.point", "must be strictly inside the container and outside obstacles")
    if abs(np.linalg.norm(em.direction) - 1.0) > 1e-9:
        raise SceneError("emission.direction", "must be a unit vector")
    if em.rate < 0:
        raise SceneError("emission.rate", "must be >= 0")
    if em.speed < 0 or em.jitter < 0:
        raise SceneError("emission", "speed and jitter must be >= 0")
    if len(scene.flow_paths) < 1:
        raise SceneError("flow_paths", "at least one flow path is required")
    for k, path in enumerate(scene.flow_paths):
        if len(path) < 2:
            raise SceneError(f"flow_paths[{k}]", "a flow path needs at least 2 vertices")
    if scene.warmup_steps < 0:
        raise SceneError("warmup_steps", "must be >= 0")
    if scene.max_particles < 1:
        raise SceneError("max_particles", "must be >= 1")
    if not scene.y_goal > scene.floor:
        raise SceneError("y_goal", "must lie above the cavity floor")
    if scene.nozzle_clearance < 0 or scene.floor + scene.nozzle_clearance > scene.y_goal:
        raise SceneError("nozzle.clearance", "must leave room below y_goal")
    scene.fluid.validate()
    scene.suction.validate()
    return scene


# -- (de)serialisation ----------------------------------------------------

def _params_from(cls, data, prefix):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise SceneError(prefix, "expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise SceneError(f"{prefix}.{sorted(unknown)[0]}", "unknown key")
    kwargs = {}
    for key, value in data.items():
        default = names[key].default
        if value is None:
            kwargs[key] = None
        elif isinstance(default, bool):
            kwargs[key] = bool(value)
        elif isinstance(default, int) and not isinstance(default, bool):
            kwargs[key] = int(value)
        else:
            kwargs[key] = float(value)
    return cls(**kwargs)


_TOP_KEYS = {"schema_version", "name", "container", "obstacles", "up", "gravity", "y_goal", "warmup_steps",
             "max_particles", "emission", "flow_paths", "nozzle", "fluid", "suction"}


def scene_from_dict(d):
    if not isinstance(d, dict):
        raise SceneError("<root>", "expected a mapping")
    unknown = set(d) - _TOP_KEYS
    if unknown:
        raise SceneError(sorted(unknown)[0], "unknown key")
    version = d.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SceneError("schema_version", f"unsupported version {version!r}")
    try:
        cont = d["container"]
        container = Box(_vec(cont["min"], "container.min"), _vec(cont["max"], "container.max"))
        open_top = bool(cont.get("open_top", True))
        em = d["emission"]
        direction = np.asarray(_vec(em["direction"], "emission.direction"))
        norm = np.linalg.norm(direction)
        if norm == 0:
            raise SceneError("emission.direction", "must be non-zero")
        emission = EmissionSpec(
            point=_vec(em["point"], "emission.point"),
            direction=tuple(float(c) for c in direction / norm),
            rate=int(em.get("rate", 4)),
            speed=float(em.get("speed", 20.0)),
            jitter=float(em.get("jitter", 0.2)),
        )
        paths = tuple(
            tuple(_vec(p, f"flow_paths[{k}][{j}]") for j, p in enumerate(path))
            for k, path in enumerate(d.get("flow_paths") or ())
        )
    except KeyError as exc:
        raise SceneError(str(exc.args[0]), "required key missing") from None
    obstacles = tuple(
        Box(_vec(o["min"], f"obstacles[{k}].min"), _vec(o["max"], f"obstacles[{k}].max"))
        for k, o in enumerate(d.get("obstacles") or ())
    )
    nozzle = d.get("nozzle") or {}
    scene = Scene(
        container=container,
        open_top=open_top,
        obstacles=obstacles,
        up=_vec(d.get("up", (0.0, 1.0, 0.0)), "up"),
        gravity=_vec(d.get("gravity", (0.0, -981.0, 0.0)), "gravity"),
        y_goal=float(d.get("y_goal", 10.0)),
        warmup_steps=int(d.get("warmup_steps", 200)),
        max_particles=int(d.get("max_particles", 2000)),
        emission=emission,
        flow_paths=paths,
        nozzle_height=float(nozzle.get("height", 1.0)),
        nozzle_clearance=float(nozzle.get("clearance", 0.5)),
        fluid=_params_from(FluidParams, d.get("fluid"), "fluid"),
        suction=_params_from(SuctionParams, d.get("suction"), "suction"),
        name=str(d.get("name", "")),
    )
    return validate_scene(scene)


def scene_to_dict(scene):
    return {
        "schema_version": SCHEMA_VERSION,
        "name": scene.name,
        "container": {"min": list(scene.container.lo), "max": list(scene.container.hi), "open_top": scene.open_top},
        "obstacles": [{"min": list(b.lo), "max": list(b.hi)} for b in scene.obstacles],
        "up": list(scene.up),
        "gravity": list(scene.gravity),
        "y_goal": scene.y_goal,
        "warmup_steps": scene.warmup_steps,
        "max_particles": scene.max_particles,
        "emission": {
            "point": list(scene.emission.point),
            "direction": list(scene.emission.direction),
            "rate": scene.emission.rate,
            "speed": scene.emission.speed,
            "jitter": scene.emission.jitter,
        },
        "flow_paths": [[list(p) for p in path] for path in scene.flow_paths],
        "nozzle": {"height": scene.nozzle_height, "clearance": scene.nozzle_clearance},
        "fluid": dataclasses.asdict(scene.fluid),
        "suction": dataclasses.asdict(scene.suction),
    }


def load_scene(text):
    """Parse and validate a YAML scene document."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise SceneError("<yaml>", getattr(exc, "problem", None) or str(exc), line=line) from None
    return scene_from_dict(data)


def dump_scene(scene):
    return yaml.safe_dump(scene_to_dict(scene), sort_keys=False)


PRESETS = ("case1", "case2")


def preset(name):
    if name not in PRESETS:
        raise SceneError("preset", f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("suction_mpc.presets").joinpath(f"{name}.yaml").read_text()
    return load_scene(text)


def desk_scale(scene, max_particles=600, rate=2):
    """Copy of ``scene`` with a smaller particle budget and emission rate."""
    return scene.scaled(max_particles, rate=rate)


# -- emission sweep ---------------------------------------------------------

@dataclass(frozen=True)
class SweepPoint:
    emission: EmissionSpec
    side: str
    wall_offset: float


def emission_sweep(scene, spacing, inset=0.5):
    """Emission points evenly spaced along the cavity's side walls.

    Points lie ``inset`` cm inside each wall at the scene's emission height and
    point along the inward wall normal. Each side of length ``L`` receives
    ``max(1, floor(L / spacing))`` points centred on the side, so corners are
    never used. Returns ``(points, skipped)`` where skipped entries fell inside
    an obstacle.
    """
    if not spacing > 0:
        raise SceneError("spacing", "must be > 0")
    (x0, _, z0), (x1, _, z1) = scene.container.lo, scene.container.hi
    y = scene.emission.point[1]
    base = scene.emission
    # walked counter-clockwise seen from above: z-min side, x-max, z-max, x-min
    sides = [
        ("z_min", (x0, z0 + inset), (x1, z0 + inset), (0.0, 1.0)),
        ("x_max", (x1 - inset, z0), (x1 - inset, z1), (-1.0, 0.0)),
        ("z_max", (x1, z1 - inset), (x0, z1 - inset), (0.0, -1.0)),
        ("x_min", (x0 + inset, z1), (x0 + inset, z0), (1.0, 0.0)),
    ]
    points, skipped = [], []
    for side, a, b, normal in sides:
        a, b = np.array(a), np.array(b)
        length = float(np.linalg.norm(b - a))
        n = max(1, int(math.floor(length / spacing + 1e-9)))
        step = min(spacing, length / n)
        start = (length - n * step) / 2.0
        for k in range(n):
            s = start + (k + 0.5) * step
            xz = a + (b - a) * (s / length)
            em = replace(base, point=(float(xz[0]), float(y), float(xz[1])),
                         direction=(normal[0], 0.0, normal[1]))
            sp = SweepPoint(em, side, s)
            if scene.inside(em.point):
                points.append(sp)
            else:
                skipped.append(sp)
    return points, skipped
