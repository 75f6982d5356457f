"""Neighbor-Attender layer and the Interlacer dynamics network.

The Interlacer processes each input timestep in its own channel
(Neighbor-Attender then a Performer PCT block, separate weights per
timestep), the kinematic particles with a quadratic PCT block, concatenates
all rows, runs a trunk (Neighbor-Attender plus three Performer blocks) and
reads per-particle deltas off the rows of the last input timestep.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .attention import PCTBlock
from .errors import ConfigError, DimensionError, ValidationError
from .nn import MLP, Linear, Module
from .spatial import PointIndex, nearest_anchor, sample_anchors
from .state import DynamicsDelta, KinematicSkeleton, ParticleState
from .tensor import Tensor, clip, concat, norm, softmax_rows, take

ARCHITECTURES = ("interlacer", "performer-pct", "quadratic-pct")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


class NeighborAttender(Module):
    """Aggregate k-NN edge features onto random anchors, then broadcast back.

    Edge features are ``(x_i, x_j, x_i - x_j, |x_i - x_j|, f_j)`` (width
    10 + f). Per anchor, a scoring MLP gives softmax weights over its
    neighbours, the weighted sum of edge features is projected to width f,
    and every particle is updated from its nearest anchor with a second MLP.
    Positions pass through untouched.
    """

    def __init__(self, f: int, rng: np.random.Generator, neighbors: int = 16, rate_divisor: int = 4,
                 score_hidden: int = 32, update_hidden: int = 64, dtype=np.float64):
        self.neighbors = neighbors
        self.rate_divisor = rate_divisor
        self.score = MLP([10 + f, score_hidden, 1], rng, dtype=dtype)
        self.proj = Linear(10 + f, f, rng, dtype=dtype)
        self.update = MLP([2 * f, update_hidden, f], rng, dtype=dtype)

    def __call__(self, state: ParticleState, seed=None, anchors=None, stats: dict | None = None) -> ParticleState:
        n = state.n
        if n < 1:
            raise ValidationError("neighbor_attender: need at least one particle")
        s = min(self.neighbors, n)
        if anchors is None:
            anchor_ids = sample_anchors(n, self.rate_divisor, _rng(seed)).ids
        else:
            anchor_ids = np.sort(np.asarray(getattr(anchors, "ids", anchors), dtype=np.intp))
        r = len(anchor_ids)
        pos = state.positions.data

        index = PointIndex(pos)
        nbr, _ = index.query(pos[anchor_ids], s)  # r x s
        flat = nbr.reshape(-1)
        xi = take(state.positions, np.repeat(anchor_ids, s))
        xj = take(state.positions, flat)
        diff = xi - xj
        edges = concat([xi, xj, diff, norm(diff, axis=-1), take(state.features, flat)], axis=1)

        scores = self.score(edges).reshape(r, s)
        weights = softmax_rows(scores)
        width = edges.shape[1]
        pooled = (weights.reshape(r, s, 1) * edges.reshape(r, s, width)).sum(axis=1)
        anchor_feat = self.proj(pooled)

        owner = nearest_anchor(pos[anchor_ids], pos)
        new_feat = self.update(concat([state.features, take(anchor_feat, owner)], axis=1))

        if stats is not None:
            stats["pairs"] = r * s
            stats["anchors"] = anchor_ids
            stats["weights"] = weights.data
            stats["owner"] = anchor_ids[owner]
        return ParticleState(state.positions, new_feat, state.timestep_tag, state.source_ids, state.resampled)


def neighbor_attender(state: ParticleState, p: NeighborAttender, seed=None, **kw) -> ParticleState:
    return p(state, seed, **kw)


@dataclass
class InterlacerConfig:
    feature_dim: int = 16
    qk_dim: int = 16
    value_dim: int = 64
    mlp_hidden: int = 64
    score_hidden: int = 32
    update_hidden: int = 64
    neighbors: int = 16
    rate_divisor: int = 4
    num_joints: int = 5
    window: int = 2
    trunk_blocks: int = 3
    trunk_neighbor_attender: bool = True
    arch: str = "interlacer"
    delta_clamp: float = 0.15
    zero_head: bool = True

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError("arch", f"must be one of {ARCHITECTURES}, got {self.arch!r}")


class Interlacer(Module):
    def __init__(self, cfg: InterlacerConfig, rng: np.random.Generator | int | None = None, dtype=np.float64):
        rng = _rng(rng)
        self.cfg = cfg
        f = cfg.feature_dim
        kind = "softmax" if cfg.arch == "quadratic-pct" else "performer"

        def block(k=kind):
            return PCTBlock(f, rng, cfg.qk_dim, cfg.value_dim, cfg.mlp_hidden, kind=k, dtype=dtype)

        def mixer():
            # the PCT-only baselines swap each Neighbor-Attender for one more attention block
            if cfg.arch == "interlacer":
                return NeighborAttender(f, rng, cfg.neighbors, cfg.rate_divisor, cfg.score_hidden,
                                        cfg.update_hidden, dtype=dtype)
            return block()

        self.channels = [_Stack([mixer(), block()]) for _ in range(cfg.window)]
        self.kin_proj = Linear(cfg.num_joints + 3, f, rng, dtype=dtype)
        self.kin_block = block("softmax")
        trunk = [mixer()] if cfg.trunk_neighbor_attender else []
        self.trunk = _Stack(trunk + [block() for _ in range(cfg.trunk_blocks)])
        self.head = Linear(f, 3 + f, rng, zero=cfg.zero_head, dtype=dtype)

    def set_block_rows(self, rows: int | None) -> None:
        """Evaluate softmax attention in row blocks (inference only)."""
        for blk in self._blocks():
            blk._block_rows = rows

    def _blocks(self):
        for stack in [*self.channels, self.trunk]:
            for layer in stack.layers:
                if isinstance(layer, PCTBlock):
                    yield layer
        yield self.kin_block

    def __call__(self, scenes: list[ParticleState], skeleton: KinematicSkeleton, seed=None,
                 anchors: dict | None = None, stats: dict | None = None) -> DynamicsDelta:
        cfg = self.cfg
        if len(scenes) != cfg.window:
            raise ValidationError(f"expected {cfg.window} input states, got {len(scenes)}")
        if skeleton.num_joints != cfg.num_joints:
            raise DimensionError(f"skeleton has {skeleton.num_joints} joints, model expects {cfg.num_joints}")
        for s in scenes:
            if s.feature_dim != cfg.feature_dim:
                raise DimensionError(f"scene feature width {s.feature_dim} != {cfg.feature_dim}")
        anchors = anchors or {}
        seeds = np.random.SeedSequence(_seed_entropy(seed)).spawn(cfg.window + 1)

        positions, features = [], []
        for t, (scene, stack) in enumerate(zip(scenes, self.channels)):
            out = stack(scene, np.random.default_rng(seeds[t]), anchors.get(f"channel{t}"), stats, f"channel{t}")
            positions.append(scene.positions)
            features.append(out.features)
        positions.append(Tensor(skeleton.positions.astype(scenes[0].positions.dtype)))
        kin = Tensor(skeleton.features.astype(scenes[0].features.dtype))
        features.append(self.kin_block(self.kin_proj(kin)))

        merged = ParticleState(concat(positions, axis=0), concat(features, axis=0))
        merged = self.trunk(merged, np.random.default_rng(seeds[-1]), anchors.get("trunk"), stats, "trunk")

        start = sum(s.n for s in scenes[:-1])
        rows = merged.features[start:start + scenes[-1].n]
        raw = self.head(rows)
        bound = np.nextafter(raw.dtype.type(cfg.delta_clamp), raw.dtype.type(0))
        dpos = clip(raw[:, :3].tanh().scale(cfg.delta_clamp), -bound, bound)
        return DynamicsDelta(dpos, raw[:, 3:])


def _seed_entropy(seed):
    if seed is None:
        return None
    if isinstance(seed, np.random.Generator):
        return int(seed.integers(2**63))
    return int(seed)


class _Stack(Module):
    """Sequence of Neighbor-Attender and PCT layers acting on a particle state."""

    def __init__(self, layers: list):
        self.layers = layers

    def __call__(self, state: ParticleState, rng, anchors, stats, name) -> ParticleState:
        for layer in self.layers:
            if isinstance(layer, NeighborAttender):
                local = {} if stats is not None else None
                state = layer(state, rng, anchors=anchors, stats=local)
                if stats is not None:
                    stats[name] = local
            else:
                state = ParticleState(state.positions, layer(state.features), state.timestep_tag,
                                      state.source_ids, state.resampled)
        return state


def interlacer_forward(scenes: list[ParticleState], skeleton: KinematicSkeleton, p: Interlacer,
                       seed=None, **kw) -> DynamicsDelta:
    return p(scenes, skeleton, seed, **kw)


def parameter_count(p: Module) -> int:
    return p.num_parameters()


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + little-endian float32 blob
# ---------------------------------------------------------------------------


def save_params(module: Module, path: str | Path, meta: dict | None = None) -> Path:
    """Write ``<path>.json`` and ``<path>.bin``; returns the manifest path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name, p in module.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        chunks.append(arr.tobytes())
    manifest = {"format": "interlacer-params", "version": 1, "dtype": "<f4",
                "tensors": entries, "meta": meta or {}}
    blob = path.with_suffix(".bin")
    tmp = blob.with_suffix(".bin.tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(blob)
    mpath = path.with_suffix(".json")
    mpath.write_text(json.dumps(manifest, indent=1))
    return mpath


def read_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != "interlacer-params":
        raise ValidationError(f"{path}: not an interlacer parameter manifest")
    blob = path.with_suffix(".bin").read_bytes()
    state = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"])
        state[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return state, manifest["meta"]


def config_dict(cfg: InterlacerConfig) -> dict:
    return asdict(cfg)
