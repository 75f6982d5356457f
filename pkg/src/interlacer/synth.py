"""Deterministic synthetic particle world with analytic dynamics and images.

Scenes hold a ground plane plus boxes and cans whose surfaces are sampled
once into points; the points then move rigidly with their object. A 2-link
pusher arm supplies the action skeleton. Three oracle rules are supported:
``rigid`` (every object translates at a fixed velocity), ``push``
(one-dimensional contact along y: an object's face never lets the tip pass)
and ``grasp`` (a can follows the tip upward if the grasp offset is within
the gripper half-width).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .render import Camera, RayBatch, default_cameras
from .world import Trajectory, write_trajectory

MAX_STEP = 0.15
SNIPPET = 8
GROUND_TILE = 0.05
WORKSPACE = ((-0.4, -0.4, -0.01), (0.4, 0.4, 0.5))


@dataclass
class ObjectSpec:
    kind: str  # "ground", "box" or "can"
    center: tuple = (0.0, 0.0, 0.0)  # geometric centre (ground: plane origin)
    size: tuple = (0.1, 0.1, 0.1)  # full extents; a can is (2r, 2r, height)
    color: tuple = (0.8, 0.2, 0.2)
    density: float = 40000.0  # points per square metre

    def __post_init__(self):
        if self.kind not in ("ground", "box", "can"):
            raise ValidationError(f"unknown object kind {self.kind!r}")
        if self.density <= 0:
            raise ValidationError(f"object density must be positive, got {self.density}")


@dataclass
class ActuatorSpec:
    base: tuple = (0.0, -0.4, 0.25)
    links: tuple = (0.3, 0.3)
    joints: int = 5
    tip_start: tuple = (0.0, -0.1, 0.05)
    tip_velocity: tuple = (0.0, 0.0, 0.0)  # metres per step
    hold_steps: int = 0  # the tip stays put for this many steps first

    def tip(self, t: int) -> np.ndarray:
        moving = max(0, t - self.hold_steps)
        return np.asarray(self.tip_start, float) + moving * np.asarray(self.tip_velocity, float)


@dataclass
class RuleSpec:
    kind: str = "push"  # "rigid", "push" or "grasp"
    velocity: tuple = (0.0, 0.0, 0.0)  # rigid rule only
    contact_threshold: float = 0.01
    gripper_half_width: float = 0.02
    lift_height: float = 0.2

    def __post_init__(self):
        if self.kind not in ("rigid", "push", "grasp"):
            raise ValidationError(f"unknown oracle rule {self.kind!r}")


@dataclass
class SceneSpec:
    objects: list
    actuator: ActuatorSpec = field(default_factory=ActuatorSpec)
    rule: RuleSpec = field(default_factory=RuleSpec)
    seed: int = 0
    workspace: tuple = WORKSPACE
    cameras: list = field(default_factory=lambda: [c.to_dict() for c in default_cameras()])

    def __post_init__(self):
        self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        if isinstance(self.actuator, dict):
            self.actuator = ActuatorSpec(**self.actuator)
        if isinstance(self.rule, dict):
            self.rule = RuleSpec(**self.rule)
        lo, hi = np.asarray(self.workspace[0]), np.asarray(self.workspace[1])
        for o in self.objects:
            if o.kind == "ground":
                continue
            c, h = np.asarray(o.center), np.asarray(o.size) / 2
            if np.any(c - h < lo) or np.any(c + h > hi):
                raise ValidationError(f"{o.kind} at {o.center} extends outside the workspace")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)

    def camera_list(self) -> list[Camera]:
        return [Camera.from_dict(c) for c in self.cameras]


# ---------------------------------------------------------------------------
# Surface colours and sampling
# ---------------------------------------------------------------------------

_FACE_SHADE = np.array([0.8, 0.8, 0.65, 0.65, 0.5, 1.0])  # -x +x -y +y -z +z


def _ground_color(obj: ObjectSpec, local: np.ndarray) -> np.ndarray:
    tile = (np.floor(local[:, 0] / GROUND_TILE) + np.floor(local[:, 1] / GROUND_TILE)) % 2
    base = np.asarray(obj.color, float)
    return np.where(tile[:, None] > 0, base, 0.75 * base)


def surface_color(obj: ObjectSpec, local: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Colour of surface points given object-local positions and normals."""
    if obj.kind == "ground":
        return _ground_color(obj, local)
    base = np.asarray(obj.color, float)
    face = np.argmax(np.abs(normal), axis=1) * 2 + (normal.max(axis=1) > 0.5)
    shade = _FACE_SHADE[face] if obj.kind == "box" else np.where(normal[:, 2] > 0.5, 1.0, 0.8)
    return shade[:, None] * base


def _count(obj: ObjectSpec, area: float) -> int:
    return max(1, int(round(obj.density * area)))


def sample_surface(obj: ObjectSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Object-local points and outward normals, uniform over the visible surface."""
    sx, sy, sz = (float(v) for v in obj.size)
    if obj.kind == "ground":
        n = _count(obj, sx * sy)
        pts = np.column_stack([rng.uniform(-sx / 2, sx / 2, n), rng.uniform(-sy / 2, sy / 2, n), np.zeros(n)])
        return pts, np.tile([0.0, 0.0, 1.0], (n, 1))
    if obj.kind == "box":
        h = np.array([sx, sy, sz]) / 2
        pts, nrm = [], []
        for axis in range(3):
            for sign in (-1, 1):
                if axis == 2 and sign < 0:
                    continue  # bottom face rests on the ground
                a, b = [i for i in range(3) if i != axis]
                n = _count(obj, 4 * h[a] * h[b])
                p = np.empty((n, 3))
                p[:, axis] = sign * h[axis]
                p[:, a] = rng.uniform(-h[a], h[a], n)
                p[:, b] = rng.uniform(-h[b], h[b], n)
                normal = np.zeros(3)
                normal[axis] = sign
                pts.append(p)
                nrm.append(np.tile(normal, (n, 1)))
        return np.concatenate(pts), np.concatenate(nrm)
    r = sx / 2
    n_side = _count(obj, 2 * np.pi * r * sz)
    theta = rng.uniform(0, 2 * np.pi, n_side)
    side = np.column_stack([r * np.cos(theta), r * np.sin(theta), rng.uniform(-sz / 2, sz / 2, n_side)])
    side_n = np.column_stack([np.cos(theta), np.sin(theta), np.zeros(n_side)])
    n_top = _count(obj, np.pi * r * r)
    rad, phi = r * np.sqrt(rng.random(n_top)), rng.uniform(0, 2 * np.pi, n_top)
    top = np.column_stack([rad * np.cos(phi), rad * np.sin(phi), np.full(n_top, sz / 2)])
    return np.concatenate([side, top]), np.concatenate([side_n, np.tile([0.0, 0.0, 1.0], (n_top, 1))])


# ---------------------------------------------------------------------------
# Actuator
# ---------------------------------------------------------------------------


def skeleton_joints(act: ActuatorSpec, tip: np.ndarray) -> np.ndarray:
    """J joints spaced evenly by arc length along base -> elbow -> tip (2-link IK)."""
    base = np.asarray(act.base, float)
    l1, l2 = (float(v) for v in act.links)
    span = tip - base
    d = float(np.linalg.norm(span))
    if d < 1e-9:
        raise ValidationError("actuator tip coincides with its base")
    d_c = min(d, l1 + l2 - 1e-9)
    u = span / d
    up = np.array([0.0, 0.0, 1.0])
    v = up - u * (up @ u)
    if np.linalg.norm(v) < 1e-9:
        v = np.array([1.0, 0.0, 0.0]) - u * u[0]
    v /= np.linalg.norm(v)
    cos_a = np.clip((l1 * l1 + d_c * d_c - l2 * l2) / (2 * l1 * d_c), -1.0, 1.0)
    elbow = base + l1 * (cos_a * u + np.sqrt(1 - cos_a * cos_a) * v)
    s = np.linspace(0.0, 1.0, act.joints)[:, None]
    first, second = l1 / (l1 + l2), l2 / (l1 + l2)
    along1 = base + (elbow - base) * np.clip(s / first, 0, 1)
    along2 = elbow + (tip - elbow) * np.clip((s - first) / second, 0, 1)
    return np.where(s <= first, along1, along2)


# ---------------------------------------------------------------------------
# Oracle dynamics
# ---------------------------------------------------------------------------


def object_offsets(spec: SceneSpec, steps: int) -> np.ndarray:
    """Translation of every object at every step (steps x objects x 3)."""
    act, rule = spec.actuator, spec.rule
    n_obj = len(spec.objects)
    offsets = np.zeros((steps, n_obj, 3))
    movable = [i for i, o in enumerate(spec.objects) if o.kind != "ground"]
    tips = np.array([act.tip(t) for t in range(steps)])
    step_sizes = np.abs(np.diff(tips, axis=0))
    if len(step_sizes) and step_sizes.max() > MAX_STEP:
        raise ValidationError(f"actuator moves {step_sizes.max():.3f} m in one step (limit {MAX_STEP})")
    if rule.kind == "rigid":
        v = np.asarray(rule.velocity, float)
        if np.abs(v).max() > MAX_STEP:
            raise ValidationError(f"rigid velocity {v} exceeds {MAX_STEP} m per step")
        for i in movable:
            offsets[:, i] = np.arange(steps)[:, None] * v
        return offsets
    if rule.kind == "grasp":
        for i in movable:
            o = spec.objects[i]
            offset = np.linalg.norm((tips[0] - np.asarray(o.center))[:2])
            if o.kind == "can" and offset <= rule.gripper_half_width:
                offsets[:, i, 2] = tips[:, 2] - tips[0, 2]
        return offsets
    for t in range(1, steps):
        offsets[t] = offsets[t - 1]
        tip = tips[t]
        for i in movable:
            o = spec.objects[i]
            c = np.asarray(o.center) + offsets[t, i]
            h = np.asarray(o.size) / 2
            thr = rule.contact_threshold
            if abs(tip[0] - c[0]) > h[0] + thr or not (c[2] - h[2] - thr <= tip[2] <= c[2] + h[2] + thr):
                continue
            if tips[t - 1][1] <= c[1]:  # tip approaches from -y: the -y face leads
                offsets[t, i, 1] += max(0.0, tip[1] - (c[1] - h[1]))
            else:
                offsets[t, i, 1] -= max(0.0, (c[1] + h[1]) - tip[1])
    return offsets


def generate_trajectory(spec: SceneSpec | dict, steps: int) -> Trajectory:
    if isinstance(spec, dict):
        spec = SceneSpec.from_dict(spec)
    if steps < 3:
        raise ValidationError(f"trajectory needs at least 3 steps, got {steps}")
    rng = np.random.default_rng(spec.seed)
    local, normals, colors, ids = [], [], [], []
    for i, obj in enumerate(spec.objects):
        p, n = sample_surface(obj, rng)
        local.append(p + np.asarray(obj.center, float))
        normals.append(n)
        colors.append(surface_color(obj, p, n))
        ids.append(np.full(len(p), i))
    rest = np.concatenate(local)
    ids = np.concatenate(ids)
    desc = np.concatenate([np.concatenate(colors), np.concatenate(normals)], axis=1)
    offsets = object_offsets(spec, steps)
    positions = rest[None] + offsets[:, ids]
    joints = np.stack([skeleton_joints(spec.actuator, spec.actuator.tip(t)) for t in range(steps)])
    meta = {"spec": spec.to_dict(), "object_offsets": offsets.tolist()}
    return Trajectory(positions, np.broadcast_to(desc, (steps,) + desc.shape).copy(), joints, ids, 0.5, meta)


# ---------------------------------------------------------------------------
# Analytic images
# ---------------------------------------------------------------------------


def _hit_box(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1, t2 = (lo - o) * inv, (hi - o) * inv
    tmin, tmax = np.minimum(t1, t2), np.maximum(t1, t2)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    enter, leave = tmin.max(1), tmax.min(1)
    axis = tmin.argmax(1)
    hit = (enter <= leave) & (enter > 0)
    normal = np.zeros_like(o)
    rows = np.arange(len(o))
    normal[rows, axis] = -np.sign(d[rows, axis])
    return np.where(hit, enter, np.inf), normal


def _hit_can(o, d, center, r, hz):
    rel = o - center
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (rel[:, 0] * d[:, 0] + rel[:, 1] * d[:, 1])
    c = rel[:, 0] ** 2 + rel[:, 1] ** 2 - r * r
    disc = b * b - 4 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
        z = rel[:, 2] + t_side * d[:, 2]
        side_ok = (disc >= 0) & (a > 0) & (t_side > 0) & (np.abs(z) <= hz)
        t_top = (hz - rel[:, 2]) / d[:, 2]
    p = rel + t_top[:, None] * d
    top_ok = (t_top > 0) & (p[:, 0] ** 2 + p[:, 1] ** 2 <= r * r)
    t_side = np.where(side_ok, t_side, np.inf)
    t_top = np.where(top_ok, t_top, np.inf)
    t = np.minimum(t_side, t_top)
    hp = rel + np.where(np.isfinite(t), t, 0)[:, None] * d
    side_n = np.column_stack([hp[:, 0], hp[:, 1], np.zeros(len(o))]) / r
    normal = np.where((t_top < t_side)[:, None], [0.0, 0.0, 1.0], side_n)
    return t, normal


def oracle_colors(spec: SceneSpec | dict, offsets: np.ndarray, rays: RayBatch) -> np.ndarray:
    """Exact ray-cast colours of the scene with objects at ``offsets`` (objects x 3)."""
    if isinstance(spec, dict):
        spec = SceneSpec.from_dict(spec)
    o, d = rays.origins, rays.directions
    best = np.full(len(o), np.inf)
    color = np.ones((len(o), 3))
    for i, obj in enumerate(spec.objects):
        c = np.asarray(obj.center, float) + np.asarray(offsets[i], float)
        size = np.asarray(obj.size, float)
        if obj.kind == "ground":
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (c[2] - o[:, 2]) / d[:, 2]
            p = o + np.where(np.isfinite(t), t, 0)[:, None] * d
            inside = (np.abs(p[:, 0] - c[0]) <= size[0] / 2) & (np.abs(p[:, 1] - c[1]) <= size[1] / 2)
            t = np.where((t > 0) & inside, t, np.inf)
            normal = np.tile([0.0, 0.0, 1.0], (len(o), 1))
        elif obj.kind == "box":
            t, normal = _hit_box(o, d, c - size / 2, c + size / 2)
        else:
            t, normal = _hit_can(o, d, c, size[0] / 2, size[2] / 2)
        closer = t < best
        if closer.any():
            local = o[closer] + t[closer, None] * d[closer] - c
            color[closer] = surface_color(obj, local, normal[closer])
            best[closer] = t[closer]
    return color


def oracle_image(spec: SceneSpec | dict, offsets: np.ndarray, camera: Camera) -> np.ndarray:
    return oracle_colors(spec, offsets, camera.rays()).reshape(camera.height, camera.width, 3)


# ---------------------------------------------------------------------------
# Scenario builders
# ---------------------------------------------------------------------------

GROUND = dict(kind="ground", size=(0.6, 0.6, 0.0), color=(0.7, 0.7, 0.7), density=4000.0)


def push_spec(seed: int, push: float | None = None, steps_moving: int = 6, hold_steps: int | None = None,
              gap: float | None = None, retreat: bool | None = None, joints: int = 5,
              box_density: float = 30000.0, cameras: list | None = None) -> SceneSpec:
    """A box on the ground and a pusher that moves along y.

    The tip moves ``push / steps_moving`` per step once ``hold_steps`` have
    passed, so ``push`` is its total travel over ``steps_moving`` steps
    (negative pushes towards -y). Omitted arguments are drawn from ``seed``. With ``retreat``
    the tip starts on the far side and moves away, so the box stays put.
    """
    rng = np.random.default_rng([seed, 7])
    size = rng.uniform(0.08, 0.12, 3)
    center = np.array([rng.uniform(-0.04, 0.04), rng.uniform(-0.04, 0.04), size[2] / 2])
    if push is None:
        push = rng.choice([-1, 1]) * rng.uniform(0.0, 0.16)
    if hold_steps is None:
        hold_steps = int(rng.integers(0, 3))
    if gap is None:
        gap = 0.0 if rng.random() < 0.6 else rng.uniform(0.0, 0.03)
    # the tip waits on the side it pushes from
    side = -1.0 if push >= 0 else 1.0
    if retreat is None:
        retreat = bool(rng.random() < 0.15)
    if retreat:
        side = -side
    tip = center + np.array([rng.uniform(-0.3, 0.3) * size[0] / 2, side * (size[1] / 2 + gap), 0.0])
    act = ActuatorSpec(base=(float(tip[0]), float(tip[1] + side * 0.3), 0.25), joints=joints,
                       tip_start=tuple(map(float, tip)),
                       tip_velocity=(0.0, float(push) / steps_moving, 0.0), hold_steps=hold_steps)
    box = dict(kind="box", center=tuple(map(float, center)), size=tuple(map(float, size)),
               color=(0.85, 0.25, 0.15), density=box_density)
    kw = {} if cameras is None else {"cameras": cameras}
    return SceneSpec([GROUND, box], act, RuleSpec("push"), seed, **kw)


def grasp_spec(seed: int, offset: float = 0.0, lift: float = 0.2, steps_moving: int = 6, hold_steps: int = 2,
               joints: int = 5, half_width: float = 0.02, cameras: list | None = None) -> SceneSpec:
    """A can lifted by ``lift`` if the tip is within the gripper half-width of its axis."""
    height, radius = 0.12, 0.033
    center = np.array([0.0, 0.0, height / 2])
    tip = center + np.array([0.0, offset, 0.0])
    act = ActuatorSpec(base=(0.0, float(tip[1]) - 0.3, 0.3), joints=joints, tip_start=tuple(map(float, tip)),
                       tip_velocity=(0.0, 0.0, lift / steps_moving), hold_steps=hold_steps)
    can = dict(kind="can", center=tuple(map(float, center)), size=(2 * radius, 2 * radius, height),
               color=(0.75, 0.1, 0.1), density=30000.0)
    kw = {} if cameras is None else {"cameras": cameras}
    return SceneSpec([GROUND, can], act, RuleSpec("grasp", gripper_half_width=half_width), seed, **kw)


def rigid_spec(seed: int, velocity=(0.02, 0.0, 0.0), joints: int = 5) -> SceneSpec:
    box = dict(kind="box", center=(0.0, 0.0, 0.05), size=(0.1, 0.1, 0.1), color=(0.2, 0.4, 0.85))
    act = ActuatorSpec(joints=joints, tip_start=(0.0, -0.25, 0.1))
    return SceneSpec([GROUND, box], act, RuleSpec("rigid", velocity=tuple(velocity)), seed)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def snippet_starts(steps: int, length: int = SNIPPET) -> list[int]:
    return list(range(0, steps - length + 1))


def make_dataset(specs: list, split: dict, out_path, steps: int = SNIPPET, length: int = SNIPPET,
                 extra: dict | None = None) -> dict:
    """Generate, slice into stride-1 snippets and write trajectories plus a manifest.

    Specs are ordered by seed and dealt to splits in contiguous blocks, so
    every split covers its own seed range.
    """
    if not specs:
        raise ValidationError("make_dataset needs at least one scene spec")
    specs = sorted((s if isinstance(s, SceneSpec) else SceneSpec.from_dict(s) for s in specs),
                   key=lambda s: s.seed)
    if len({s.seed for s in specs}) != len(specs):
        raise ValidationError("scene seeds must be unique")
    names = list(split)
    fractions = np.asarray([split[k] for k in names], float)
    if np.any(fractions < 0) or fractions.sum() <= 0:
        raise ValidationError(f"invalid split fractions {split}")
    bounds = np.rint(np.cumsum(fractions / fractions.sum()) * len(specs)).astype(int)
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    lo = 0
    for name, hi in zip(names, bounds):
        for spec in specs[lo:hi]:
            traj = generate_trajectory(spec, steps)
            for start in snippet_starts(steps, length):
                fname = f"{name}_{spec.seed:06d}_{start:03d}.traj"
                write_trajectory(out / fname, traj.window(start, length))
                entries.append({"file": fname, "split": name, "seed": spec.seed, "start": start})
        lo = hi
    manifest = {
        "format": "interlacer-dataset",
        "snippet_length": length,
        "snippets": entries,
        "counts": {k: sum(e["split"] == k for e in entries) for k in names},
        "seeds": {k: sorted({e["seed"] for e in entries if e["split"] == k}) for k in names},
        **(extra or {}),
    }
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1))
    tmp.replace(out / "manifest.json")
    return manifest
