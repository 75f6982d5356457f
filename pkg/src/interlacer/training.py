"""Optimisation of the world model on rendered pixels over multi-step rollouts."""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig, to_dict
from .errors import ContractError, ValidationError
from .model import WorldModel, load_model, save_model
from .render import RayBatch, pixel_loss, render_rays
from .spatial import PointIndex
from .state import DynamicsDelta, ParticleState
from .synth import SceneSpec, oracle_colors
from .tensor import Tensor, backward
from .world import WINDOW, Trajectory, encode_points, read_trajectory, rollout

METRIC_FIELDS = [
    "step", "loss", "pixel_loss", "particle_loss", "grad_norm", "lr", "seconds",
    "eval_next_particle_mse", "eval_frozen_particle_mse", "eval_next_pixel_mse", "eval_k_pixel_mse",
    "eval_recon_pixel_mse", "eval_monotone_fraction",
]


# ---------------------------------------------------------------------------
# Schedule and optimiser
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant learning rate: ``values[i]`` applies from ``boundaries[i-1]``."""

    boundaries: tuple = (1000, 100_000)
    values: tuple = (3e-4, 1e-4, 3e-5)

    def __post_init__(self):
        if len(self.values) != len(self.boundaries) + 1:
            raise ValidationError("schedule needs one more value than boundaries")
        if list(self.boundaries) != sorted(self.boundaries):
            raise ValidationError("schedule boundaries must be nondecreasing")
        if any(b > a for a, b in zip(self.values, self.values[1:])):
            raise ValidationError("schedule values must be nonincreasing")

    def __call__(self, step: int) -> float:
        for bound, value in zip(self.boundaries, self.values):
            if step < bound:
                return value
        return self.values[-1]

    @classmethod
    def compressed(cls, total: int, values=(3e-4, 1e-4, 3e-5)) -> "Schedule":
        """Same shape squeezed into ``total`` steps: breakpoints at 1% and 50%."""
        return cls((max(1, round(0.01 * total)), max(1, round(0.5 * total))), tuple(values))


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients together so their joint norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * g.dtype.type(scale) for g in grads]
    return grads, norm


class AdamW:
    """Adam with weight decay decoupled from the gradient (applied as ``p *= 1 - lr * wd``)."""

    def __init__(self, params: list[Tensor], weight_decay: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.weight_decay, self.beta1, self.beta2, self.eps = weight_decay, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            p.data *= 1 - lr * self.weight_decay
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        out = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"], out[f"v{i}"] = m, v
        return out

    def load(self, state) -> None:
        self.t = int(state["t"])
        for i in range(len(self.m)):
            self.m[i][...] = state[f"m{i}"]
            self.v[i][...] = state[f"v{i}"]


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


class SnippetSet:
    """Snippets of one split listed in a dataset manifest, loaded lazily and cached."""

    def __init__(self, root: str | Path, split: str, limit: int = 0):
        self.root = Path(root)
        mpath = self.root / "manifest.json"
        if not mpath.exists():
            raise FileNotFoundError(f"dataset manifest not found: {mpath}")
        self.manifest = json.loads(mpath.read_text())
        self.entries = [e for e in self.manifest["snippets"] if e["split"] == split]
        if limit:
            self.entries = self.entries[:limit]
        if not self.entries:
            raise ValidationError(f"{mpath}: split {split!r} has no snippets")
        self._cache: dict[int, Trajectory] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> Trajectory:
        if i not in self._cache:
            t = read_trajectory(self.root / self.entries[i]["file"])
            t.positions = t.positions.astype(np.float32)
            t.descriptors = t.descriptors.astype(np.float32)
            self._cache[i] = t
        return self._cache[i]

    @property
    def scenario(self) -> str | None:
        return self.manifest.get("scenario")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def encode_window(model: WorldModel, traj: Trajectory, seeds) -> list[ParticleState]:
    mc = model.cfg
    return [encode_points(traj.positions[t], traj.descriptors[t], mc.particles, np.random.default_rng(seeds[t]),
                          model.encoder, mc.workspace, timestep_tag=t) for t in range(WINDOW)]


def particle_errors(states: list[ParticleState], traj: Trajectory) -> list[float]:
    """Mean squared Euclidean error of each state against the oracle at its timestep."""
    out = []
    for s in states:
        truth = traj.positions[s.timestep_tag][s.source_ids]
        out.append(float(np.mean(np.sum((s.positions.data - truth) ** 2, axis=1))))
    return out


def sample_view_rays(spec: SceneSpec, per_view: int, rng: np.random.Generator) -> RayBatch:
    """``per_view`` pixels drawn uniformly from each camera, stacked."""
    origins, dirs = [], []
    for cam in spec.camera_list():
        rays = cam.rays(rng.integers(0, cam.width * cam.height, per_view))
        origins.append(rays.origins)
        dirs.append(rays.directions)
    return RayBatch(np.concatenate(origins), np.concatenate(dirs))


def trajectory_loss(model: WorldModel, traj: Trajectory, cfg: TrainConfig, rng: np.random.Generator):
    """Rendered-pixel loss (plus the optional particle term) over inputs and a K-step rollout."""
    k = cfg.rollout
    if traj.steps < WINDOW + k:
        raise ContractError(f"trajectory has {traj.steps} steps, need {WINDOW + k}")
    seeds = rng.integers(0, 2**63, size=WINDOW + 2)
    states = encode_window(model, traj, seeds)
    actions = [traj.skeleton(t) for t in range(WINDOW, WINDOW + k)]
    preds = rollout(states, actions, model.dynamics, int(seeds[-2]))
    spec = SceneSpec.from_dict(traj.meta["spec"])
    offsets = np.asarray(traj.meta["object_offsets"])
    ray_rng = np.random.default_rng(int(seeds[-1]))
    pix = None
    for st in states + preds:
        rays = sample_view_rays(spec, cfg.rays_per_view, ray_rng)
        target = oracle_colors(spec, offsets[st.timestep_tag], rays)
        out = render_rays(rays, st, model.field, model.kernels, model.cfg.samples_per_ray, rng=ray_rng)
        term = pixel_loss(out.color, target)
        pix = term if pix is None else pix + term
    pix = pix.scale(1.0 / (WINDOW + k))
    loss = pix
    part = None
    if cfg.aux_particle_loss:
        for p in preds:
            truth = traj.positions[p.timestep_tag][p.source_ids]
            err = (p.positions - Tensor(truth.astype(p.positions.dtype))).square().sum(axis=1).mean()
            part = err if part is None else part + err
        part = part.scale(1.0 / k)
        loss = pix + part.scale(cfg.aux_weight)
    return loss, {"pixel_loss": pix.item(), "particle_loss": None if part is None else part.item()}


# worker-process state for parallel batch elements
_WORKER: dict = {}


def _worker_init(model_cfg, train_cfg, data_root):
    _WORKER["model"] = WorldModel(model_cfg, 0)
    _WORKER["cfg"] = train_cfg
    _WORKER["data"] = SnippetSet(data_root, "train")


def _worker_grads(params, index, seed):
    model, cfg = _WORKER["model"], _WORKER["cfg"]
    model.load_state_dict(params)
    model.zero_grad()
    loss, parts = trajectory_loss(model, _WORKER["data"][index], cfg, np.random.default_rng(seed))
    backward(loss)
    return [p.grad for p in model.parameters()], loss.item(), parts


def worker_count() -> int:
    try:
        cap = int(os.environ.get("INTERLACER_THREADS", "1"))
    except ValueError:
        raise ValidationError("INTERLACER_THREADS must be an integer") from None
    return max(1, cap)


def training_step(batch: list[Trajectory], model: WorldModel, opt: AdamW, sched: Schedule, cfg: TrainConfig,
                  rng: np.random.Generator, pool=None, indices=None) -> dict:
    """One optimiser update from the summed per-element gradients of a batch."""
    params = model.parameters()
    step = opt.t
    lr = sched(step)
    seeds = rng.integers(0, 2**63, size=len(batch))
    losses, pixels, particles = [], [], []
    if pool is not None and indices is not None:
        state = model.state_dict()
        futures = [pool.submit(_worker_grads, state, int(i), int(s)) for i, s in zip(indices, seeds)]
        grads = [np.zeros_like(p.data) for p in params]
        for fut in futures:
            g, loss, parts = fut.result()
            for acc, gi in zip(grads, g):
                if gi is not None:
                    acc += gi / len(batch)
            losses.append(loss)
            pixels.append(parts["pixel_loss"])
            particles.append(parts["particle_loss"])
    else:
        model.zero_grad()
        for traj, seed in zip(batch, seeds):
            loss, parts = trajectory_loss(model, traj, cfg, np.random.default_rng(seed))
            backward(loss.scale(1.0 / len(batch)))
            losses.append(loss.item())
            pixels.append(parts["pixel_loss"])
            particles.append(parts["particle_loss"])
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
    opt.step(grads, lr)
    model.zero_grad()
    for p in params:
        if not np.isfinite(p.data).all():
            raise ContractError(f"non-finite parameter after step {step}")
    return {
        "step": step + 1,
        "loss": float(np.mean(losses)),
        "pixel_loss": float(np.mean(pixels)),
        "particle_loss": None if particles[0] is None else float(np.mean(particles)),
        "grad_norm": norm,
        "lr": lr,
    }


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


class OracleDynamics:
    """Stand-in dynamics that moves every particle to its true next position."""

    def __init__(self, traj: Trajectory):
        self.traj = traj

    def __call__(self, scenes, skeleton, seed=None, **_):
        last = scenes[-1]
        truth = self.traj.positions[last.timestep_tag + 1][last.source_ids]
        dpos = Tensor(truth.astype(last.positions.dtype) - last.positions.data)
        return DynamicsDelta(dpos, Tensor(np.zeros(last.features.shape, last.features.dtype)))


def _pixel_mse(model: WorldModel, state: ParticleState, spec: SceneSpec, offsets, rays: RayBatch) -> float:
    target = oracle_colors(spec, offsets[state.timestep_tag], rays)
    out = render_rays(rays, state, model.field, model.kernels, model.cfg.samples_per_ray,
                      index=PointIndex(state.positions.data))
    return float(np.mean((out.color.data - target) ** 2))


def evaluate(model: WorldModel, snippets, rollout_steps: int = 6, rays_per_view: int = 256, seed: int = 0,
             oracle: bool = False) -> dict:
    """Pixel and particle errors of K-step rollouts; deterministic for a fixed ``seed``.

    ``oracle=True`` replaces the learned dynamics with the analytic one.
    """
    if len(snippets) == 0:
        raise ValidationError("evaluate needs at least one snippet")
    model.requires_grad_(False)
    try:
        per_step, frozen, next_pix, k_pix, recon_pix, monotone = [], [], [], [], [], []
        for i in range(len(snippets)):
            traj = snippets[i]
            if traj.steps < WINDOW + rollout_steps:
                raise ContractError(f"snippet {i} has {traj.steps} steps, need {WINDOW + rollout_steps}")
            ss = np.random.SeedSequence([seed, i]).generate_state(WINDOW + 2, np.uint64)
            states = encode_window(model, traj, ss)
            actions = [traj.skeleton(t) for t in range(WINDOW, WINDOW + rollout_steps)]
            dyn = OracleDynamics(traj) if oracle else model.dynamics
            preds = rollout(states, actions, dyn, int(ss[-2]))
            errs = particle_errors(preds, traj)
            per_step.append(errs)
            last = states[-1]
            frozen.append([float(np.mean(np.sum((last.positions.data - traj.positions[p.timestep_tag][last.source_ids]) ** 2, axis=1)))
                           for p in preds])
            monotone.append(all(b >= a for a, b in zip(errs, errs[1:])))
            spec = SceneSpec.from_dict(traj.meta["spec"])
            offsets = np.asarray(traj.meta["object_offsets"])
            rays = sample_view_rays(spec, rays_per_view, np.random.default_rng(int(ss[-1])))
            recon_pix.append(_pixel_mse(model, last, spec, offsets, rays))
            next_pix.append(_pixel_mse(model, preds[0], spec, offsets, rays))
            k_pix.append(_pixel_mse(model, preds[-1], spec, offsets, rays))
    finally:
        model.requires_grad_(True)
    per_step = np.asarray(per_step)
    frozen = np.asarray(frozen)
    return {
        "snippets": len(snippets),
        "particle_mse_per_step": per_step.mean(axis=0).tolist(),
        "frozen_mse_per_step": frozen.mean(axis=0).tolist(),
        "next_particle_mse": float(per_step[:, 0].mean()),
        "frozen_particle_mse": float(frozen[:, 0].mean()),
        "next_pixel_mse": float(np.mean(next_pix)),
        "k_pixel_mse": float(np.mean(k_pix)),
        "recon_pixel_mse": float(np.mean(recon_pix)),
        "monotone_fraction": float(np.mean(monotone)),
        "per_snippet_particle_mse": per_step.tolist(),
    }


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def write_csv_atomic(path: Path, fields: list[str], rows: list[dict]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    tmp.replace(path)


def train(cfg: TrainConfig, out_dir: str | Path, resume: bool = False, log=None) -> dict:
    """Run ``cfg.steps`` updates; writes ``metrics.csv`` and ``model.{json,bin}`` to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = SnippetSet(cfg.data, "train")
    test = SnippetSet(cfg.data, "test", cfg.eval_snippets)
    sched = (Schedule((cfg.lr_boundaries[0], cfg.lr_boundaries[1]), tuple(cfg.lr_values))
             if cfg.lr_boundaries else Schedule.compressed(cfg.steps, tuple(cfg.lr_values)))
    ckpt = out / "model"
    rows: list[dict] = []
    if resume and ckpt.with_suffix(".json").exists():
        model, meta = load_model(ckpt)
        opt = AdamW(model.parameters(), cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
        opt.load(np.load(out / "optimizer.npz"))
        if (out / "metrics.csv").exists():
            with open(out / "metrics.csv") as fh:
                rows = [{k: v for k, v in r.items() if v != ""} for r in csv.DictReader(fh)]
    else:
        model = WorldModel(cfg.model, np.random.default_rng([cfg.seed, 1]))
        opt = AdamW(model.parameters(), cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
    meta = {"scenario": data.scenario, "train": to_dict(cfg)}

    threads = min(worker_count(), cfg.batch_size)
    pool = (ProcessPoolExecutor(threads, initargs=(cfg.model, cfg, cfg.data), initializer=_worker_init)
            if threads > 1 else None)

    def checkpoint():
        meta["step"] = opt.t
        save_model(model, ckpt, meta)
        tmp = out / "optimizer.tmp.npz"
        np.savez(tmp, **opt.state())
        tmp.replace(out / "optimizer.npz")
        write_csv_atomic(out / "metrics.csv", METRIC_FIELDS, rows)

    last_eval = None
    try:
        t0 = time.perf_counter()
        while opt.t < cfg.steps:
            rng = np.random.default_rng([cfg.seed, opt.t])
            idx = rng.choice(len(data), size=min(cfg.batch_size, len(data)), replace=False)
            m = training_step([data[int(i)] for i in idx], model, opt, sched, cfg, rng, pool, idx)
            m["seconds"] = round(time.perf_counter() - t0, 3)
            step = opt.t
            if step % cfg.eval_every == 0 or step == cfg.steps:
                ev = evaluate(model, test, cfg.rollout, cfg.eval_rays_per_view, seed=cfg.seed)
                last_eval = ev
                m.update({
                    "eval_next_particle_mse": ev["next_particle_mse"],
                    "eval_frozen_particle_mse": ev["frozen_particle_mse"],
                    "eval_next_pixel_mse": ev["next_pixel_mse"],
                    "eval_k_pixel_mse": ev["k_pixel_mse"],
                    "eval_recon_pixel_mse": ev["recon_pixel_mse"],
                    "eval_monotone_fraction": ev["monotone_fraction"],
                })
            if step % cfg.log_every == 0 or step == 1 or "eval_next_particle_mse" in m:
                rows.append(m)
                if log:
                    log(m)
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                checkpoint()
    finally:
        if pool is not None:
            pool.shutdown()
    checkpoint()
    return {"steps": opt.t, "final": rows[-1] if rows else None, "eval": last_eval, "checkpoint": str(ckpt)}
