"""Particle-state machinery: point encoding, delta updates, rollouts, plan costs.

Also owns the on-disk trajectory format: a 4-byte magic, a little-endian
uint32 header length, a UTF-8 JSON header, an int32 object-id block, then
one record per timestep holding float32 positions (P x 3), descriptors
(P x D) and skeleton joints (J x 3).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, ValidationError
from .interlacer import Interlacer
from .nn import MLP, Module
from .state import DynamicsDelta, KinematicSkeleton, ParticleState
from .tensor import Tensor

WINDOW = 2
TRAJECTORY_MAGIC = b"ILTJ"


class Encoder(Module):
    """Per-point MLP lifting raw descriptors (position ++ colour ++ normal) to features."""

    def __init__(self, descriptor_dim: int, rng: np.random.Generator, feature_dim: int = 16,
                 hidden: int = 32, dtype=np.float64):
        self.mlp = MLP([3 + descriptor_dim, hidden, feature_dim], rng, dtype=dtype)

    def __call__(self, positions: np.ndarray, descriptors: np.ndarray) -> Tensor:
        dtype = self.mlp.layers[0].weight.dtype
        x = np.concatenate([positions, descriptors], axis=1).astype(dtype)
        return self.mlp(Tensor(x))


def subsample(count: int, budget: int, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Indices of ``budget`` points: without replacement, or with it if ``count < budget``."""
    if count < 1:
        raise ValidationError("cannot subsample an empty point cloud")
    if count >= budget:
        return rng.permutation(count)[:budget], False
    return rng.integers(0, count, size=budget), True


def workspace_mask(positions: np.ndarray, workspace) -> np.ndarray:
    if workspace is None:
        return np.ones(len(positions), dtype=bool)
    lo, hi = np.asarray(workspace[0]), np.asarray(workspace[1])
    return np.all((positions >= lo) & (positions <= hi), axis=1)


def encode_points(positions: np.ndarray, descriptors: np.ndarray, budget: int, seed, encoder: Encoder,
                  workspace=None, timestep_tag: int = 0) -> ParticleState:
    """Filter to the workspace box, subsample to ``budget`` points and encode them."""
    positions = np.asarray(positions)
    keep = np.flatnonzero(workspace_mask(positions, workspace))
    if len(keep) == 0:
        raise ValidationError("point cloud is empty (after workspace filtering)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pick, resampled = subsample(len(keep), budget, rng)
    ids = keep[pick]
    feats = encoder(positions[ids], np.asarray(descriptors)[ids])
    pos = Tensor(positions[ids].astype(feats.dtype))
    return ParticleState(pos, feats, timestep_tag, source_ids=ids, resampled=resampled)


def apply_delta(state: ParticleState, delta: DynamicsDelta) -> ParticleState:
    if delta.dpos.shape[0] != state.n or delta.dfeat.shape != state.features.shape:
        raise DimensionError(
            f"delta {delta.dpos.shape}/{delta.dfeat.shape} does not match state "
            f"{state.positions.shape}/{state.features.shape}"
        )
    return ParticleState(state.positions + delta.dpos, state.features + delta.dfeat,
                         state.timestep_tag + 1, state.source_ids, state.resampled)


def rollout(states: list[ParticleState], actions: list[KinematicSkeleton], model: Interlacer,
            seed=None) -> list[ParticleState]:
    """Recursively predict ``len(actions)`` future states.

    Step k feeds the two most recent states and the skeleton triple ending
    at ``T + k``; the delta is applied to the more recent state.
    """
    if len(states) != WINDOW:
        raise ContractError(f"rollout needs {WINDOW} input states, got {len(states)}")
    if len(actions) < 1:
        raise ContractError("rollout needs at least one action")
    seeds = np.random.SeedSequence(None if seed is None else int(seed)).generate_state(len(actions), np.uint64)
    history = list(states)
    predicted = []
    for k, action in enumerate(actions):
        if action is None:
            raise ContractError(f"missing action for rollout step {k}")
        delta = model(history[-2:], action, seed=int(seeds[k]))
        nxt = apply_delta(history[-1], delta)
        history.append(nxt)
        predicted.append(nxt)
    return predicted


# ---------------------------------------------------------------------------
# Plan costs
# ---------------------------------------------------------------------------


@dataclass
class Objective:
    """``push``: target displacement along y; ``lift``: goal height gain.

    Tracked particles are those inside ``region`` (lo, hi corners) in the
    first state of the sequence.
    """

    kind: str
    target: float
    region: tuple = field(default_factory=lambda: ((-np.inf,) * 3, (np.inf,) * 3))

    def __post_init__(self):
        if self.kind not in ("push", "lift"):
            raise ValidationError(f"objective kind must be push or lift, got {self.kind!r}")


def tracked_particles(state: ParticleState, region) -> np.ndarray:
    return np.flatnonzero(workspace_mask(state.positions.data, region))


def plan_cost(states: list[ParticleState], objective: Objective) -> float:
    """Cost of a predicted sequence whose first element is the reference state.

    push: ``|median dy - target|``; lift: ``|target - median dz|``, where the
    displacement runs from the first to the last state.
    """
    if len(states) < 2:
        raise ContractError("plan_cost needs a reference state and at least one prediction")
    ids = tracked_particles(states[0], objective.region)
    if len(ids) == 0:
        raise ValidationError("objective region selects no particles")
    disp = states[-1].positions.data[ids] - states[0].positions.data[ids]
    if objective.kind == "push":
        return float(abs(np.median(disp[:, 1]) - objective.target))
    return float(abs(objective.target - np.median(disp[:, 2])))


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Raw observations and actions over uniformly spaced steps.

    ``positions``: steps x P x 3, ``descriptors``: steps x P x D,
    ``joints``: steps x J x 3, ``object_ids``: P.
    """

    positions: np.ndarray
    descriptors: np.ndarray
    joints: np.ndarray
    object_ids: np.ndarray
    dt: float = 0.5
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s, p = self.positions.shape[:2]
        if self.descriptors.shape[:2] != (s, p) or self.joints.shape[0] != s or len(self.object_ids) != p:
            raise DimensionError("trajectory arrays disagree on steps or point count")

    @property
    def steps(self) -> int:
        return self.positions.shape[0]

    @property
    def num_points(self) -> int:
        return self.positions.shape[1]

    def skeleton(self, t: int) -> KinematicSkeleton:
        return KinematicSkeleton.from_sequence(self.joints, t)

    def window(self, start: int, length: int) -> "Trajectory":
        if start < 0 or start + length > self.steps:
            raise ContractError(f"window [{start}, {start + length}) outside {self.steps} steps")
        meta = dict(self.meta)
        if "object_offsets" in meta:
            meta["object_offsets"] = meta["object_offsets"][start:start + length]
        meta["window_start"] = meta.get("window_start", 0) + start
        sl = slice(start, start + length)
        return Trajectory(self.positions[sl], self.descriptors[sl], self.joints[sl], self.object_ids,
                          self.dt, meta)


def write_trajectory(path: str | Path, traj: Trajectory) -> None:
    header = {
        "format": "interlacer-trajectory",
        "version": 1,
        "steps": traj.steps,
        "num_points": traj.num_points,
        "descriptor_dim": traj.descriptors.shape[2],
        "num_joints": traj.joints.shape[1],
        "dt": traj.dt,
        "meta": traj.meta,
    }
    raw = json.dumps(header).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(TRAJECTORY_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(np.asarray(traj.object_ids, dtype="<i4").tobytes())
        for t in range(traj.steps):
            fh.write(np.asarray(traj.positions[t], dtype="<f4").tobytes())
            fh.write(np.asarray(traj.descriptors[t], dtype="<f4").tobytes())
            fh.write(np.asarray(traj.joints[t], dtype="<f4").tobytes())
    tmp.replace(path)


def read_trajectory(path: str | Path) -> Trajectory:
    buf = Path(path).read_bytes()
    if buf[:4] != TRAJECTORY_MAGIC:
        raise ValidationError(f"{path}: not a trajectory file")
    (hlen,) = struct.unpack("<I", buf[4:8])
    header = json.loads(buf[8:8 + hlen])
    s, p, d, j = header["steps"], header["num_points"], header["descriptor_dim"], header["num_joints"]
    off = 8 + hlen
    ids = np.frombuffer(buf, "<i4", p, off).astype(np.int64)
    off += 4 * p
    pos = np.empty((s, p, 3))
    desc = np.empty((s, p, d))
    joints = np.empty((s, j, 3))
    for t in range(s):
        pos[t] = np.frombuffer(buf, "<f4", p * 3, off).reshape(p, 3)
        off += 12 * p
        desc[t] = np.frombuffer(buf, "<f4", p * d, off).reshape(p, d)
        off += 4 * p * d
        joints[t] = np.frombuffer(buf, "<f4", j * 3, off).reshape(j, 3)
        off += 12 * j
    return Trajectory(pos, desc, joints, ids, header["dt"], header["meta"])
