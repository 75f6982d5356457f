"""The work behind each CLI subcommand, callable without argument parsing."""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bench import cmd_bench, write_report
from .config import BenchConfig, EvalConfig, GenConfig, ModelConfig, PlanConfig, RenderConfig, TrainConfig, to_dict
from .errors import ValidationError
from .model import WorldModel, load_model
from .render import default_cameras, render_image, write_ppm
from .synth import SceneSpec, generate_trajectory, grasp_spec, make_dataset, oracle_image, push_spec, rigid_spec
from .training import OracleDynamics, SnippetSet, encode_window, evaluate, train, write_csv_atomic
from .world import WINDOW, Objective, plan_cost, read_trajectory, rollout

__all__ = ["cmd_gen", "cmd_train", "cmd_eval", "cmd_bench", "cmd_plan", "cmd_render", "scenario_spec"]


def scenario_spec(scenario: str, seed: int, joints: int = 5, image_size: int = 48) -> SceneSpec:
    """A randomised training scene of the given kind."""
    cams = [c.to_dict() for c in default_cameras(image_size, image_size)]
    if scenario == "push":
        return push_spec(seed, joints=joints, cameras=cams)
    if scenario == "grasp":
        rng = np.random.default_rng([seed, 11])
        return grasp_spec(seed, offset=float(rng.uniform(-0.04, 0.04)), joints=joints, cameras=cams)
    if scenario == "rigid":
        rng = np.random.default_rng([seed, 13])
        vel = rng.uniform(-0.02, 0.02, 3) * np.array([1.0, 1.0, 0.0])
        spec = rigid_spec(seed, velocity=tuple(vel), joints=joints)
        spec.cameras = cams
        return spec
    raise ValidationError(f"unknown scenario {scenario!r}")


def cmd_gen(cfg: GenConfig, out: str | Path) -> dict:
    specs = [scenario_spec(cfg.scenario, cfg.seed + i, cfg.joints, cfg.image_size) for i in range(cfg.count)]
    return make_dataset(specs, cfg.split, out, steps=cfg.steps,
                        extra={"scenario": cfg.scenario, "config": to_dict(cfg)})


def cmd_train(cfg: TrainConfig, out: str | Path, resume: bool = False, log=None) -> dict:
    return train(cfg, out, resume=resume, log=log)


def cmd_eval(cfg: EvalConfig, out: str | Path | None = None) -> dict:
    model, _ = load_model(cfg.checkpoint)
    snippets = SnippetSet(cfg.data, cfg.split, cfg.snippets)
    result = evaluate(model, snippets, cfg.rollout, cfg.rays_per_view, cfg.seed, oracle=cfg.oracle)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        tmp = out / "eval.json.tmp"
        tmp.write_text(json.dumps(result, indent=1))
        tmp.replace(out / "eval.json")
        rows = [{"k": k + 1, "particle_mse": a, "frozen_mse": b}
                for k, (a, b) in enumerate(zip(result["particle_mse_per_step"], result["frozen_mse_per_step"]))]
        write_csv_atomic(out / "eval.csv", ["k", "particle_mse", "frozen_mse"], rows)
    return result


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------


def plan_scene(scenario: str, candidate: float, scene_seed: int, joints: int) -> SceneSpec:
    """The scene a candidate action is rolled out in.

    push: the tip starts touching the box on the side it pushes from and
    travels ``candidate`` metres along y; grasp: the tip sits ``candidate``
    metres off the can axis and rises.
    """
    if scenario == "push":
        return push_spec(scene_seed, push=candidate, hold_steps=1, gap=0.0, retreat=False, joints=joints)
    return grasp_spec(scene_seed, offset=candidate, hold_steps=1, joints=joints)


def _objective(scenario: str, spec: SceneSpec, goal: float) -> Objective:
    obj = spec.objects[1]
    c, h = np.asarray(obj.center), np.asarray(obj.size) / 2 + 0.01
    lo = c - h
    lo[2] = max(lo[2], 0.01)  # leave the ground out
    return Objective("push" if scenario == "push" else "lift", goal, (tuple(lo), tuple(c + h)))


def cmd_plan(cfg: PlanConfig, out: str | Path | None = None) -> list[dict]:
    """Roll out every candidate and rank by plan cost (ties by candidate order)."""
    if cfg.oracle:
        model = WorldModel(ModelConfig(), np.random.default_rng(cfg.seed))
    else:
        model, meta = load_model(cfg.checkpoint)
        trained_on = meta.get("scenario")
        if trained_on != cfg.scenario:
            raise ValidationError(f"checkpoint was trained on {trained_on!r}, cannot plan {cfg.scenario!r}")
    joints = model.cfg.interlacer.num_joints
    seeds = np.random.SeedSequence([cfg.seed, cfg.scene_seed]).generate_state(WINDOW + 1, np.uint64)
    model.requires_grad_(False)
    results = []
    try:
        for i, cand in enumerate(cfg.candidates):
            spec = plan_scene(cfg.scenario, cand, cfg.scene_seed, joints)
            traj = generate_trajectory(spec, WINDOW + cfg.rollout)
            states = encode_window(model, traj, seeds)
            actions = [traj.skeleton(t) for t in range(WINDOW, WINDOW + cfg.rollout)]
            dyn = OracleDynamics(traj) if cfg.oracle else model.dynamics
            preds = rollout(states, actions, dyn, int(seeds[-1]))
            cost = plan_cost([states[-1]] + preds, _objective(cfg.scenario, spec, cfg.goal))
            results.append({"order": i, "candidate": cand, "cost": cost})
    finally:
        model.requires_grad_(True)
    ranked = sorted(results, key=lambda r: (r["cost"], r["order"]))
    for rank, r in enumerate(ranked, 1):
        r["rank"] = rank
        del r["order"]
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_csv_atomic(out / "plan.csv", ["rank", "candidate", "cost"], ranked)
    return ranked


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def cmd_render(cfg: RenderConfig, out: str | Path) -> list[Path]:
    """Reconstructions of the input steps, then predictions for each rollout step.

    When the trajectory carries its scene description the analytic target
    images are written alongside (``truth_*``).
    """
    if not cfg.trajectory:
        raise ValidationError("render.trajectory: a trajectory file is required")
    model, _ = load_model(cfg.checkpoint)
    traj = read_trajectory(cfg.trajectory)
    k = min(cfg.rollout, traj.steps - WINDOW)
    if k < 0:
        raise ValidationError(f"{cfg.trajectory}: needs at least {WINDOW} steps")
    spec = SceneSpec.from_dict(traj.meta["spec"]) if "spec" in traj.meta else None
    cams = spec.camera_list() if spec is not None else default_cameras()
    if cfg.image_size:
        cams = [replace(c, width=cfg.image_size, height=cfg.image_size) for c in cams]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(cfg.seed).generate_state(WINDOW + 1, np.uint64)
    model.requires_grad_(False)
    written = []
    try:
        states = encode_window(model, traj, seeds)
        actions = [traj.skeleton(t) for t in range(WINDOW, WINDOW + k)]
        preds = rollout(states, actions, model.dynamics, int(seeds[-1])) if k else []
        frames = [(f"recon_t{s.timestep_tag}", s) for s in states]
        frames += [(f"pred_k{i + 1}", s) for i, s in enumerate(preds)]
        for name, state in frames:
            for v, cam in enumerate(cams):
                path = out / f"{name}_view{v}.ppm"
                write_ppm(path, render_image(cam, state, model.field, model.kernels, model.cfg.samples_per_ray))
                written.append(path)
                if spec is not None:
                    offsets = np.asarray(traj.meta["object_offsets"])[state.timestep_tag]
                    tpath = out / f"truth_{name}_view{v}.ppm"
                    write_ppm(tpath, oracle_image(spec, offsets, cam))
                    written.append(tpath)
    finally:
        model.requires_grad_(True)
    return written


def run_bench(cfg: BenchConfig, out: str | Path, log=None):
    report = cmd_bench(cfg, log=log)
    write_report(report, out, cfg.gnuplot)
    return report
