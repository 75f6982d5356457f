import csv
import json

import numpy as np
import pytest
from scipy import stats

from interlacer import bench
from interlacer.bench import ScalingReport, ScalingRow, cmd_bench, gnuplot_script, write_report
from interlacer.cli import main
from interlacer.commands import cmd_plan
from interlacer.config import BenchConfig, ModelConfig, PlanConfig
from interlacer.errors import ValidationError
from interlacer.model import WorldModel, save_model
from interlacer.render import read_ppm
from interlacer.synth import generate_trajectory, make_dataset, push_spec
from interlacer.world import write_trajectory


def write_config(path, section, body):
    path.write_text(json.dumps({section: body}))
    return path


def lines(capsys):
    return [json.loads(x) for x in capsys.readouterr().out.splitlines() if x.strip()]


# ---------------------------------------------------------------------------
# argument and config handling
# ---------------------------------------------------------------------------


def test_exit_codes(tmp_path, capsys):
    assert main(["nonsense"]) == 2
    assert main(["gen", "--seed", "-1", "--out", str(tmp_path / "g")]) == 2
    assert main(["gen", "--seed", str(2**64), "--out", str(tmp_path / "g")]) == 2
    assert main(["gen", "--config", str(tmp_path / "missing.json")]) == 3
    bad = write_config(tmp_path / "bad.json", "train", {"model": {"interlacer": {"arch": "gnn"}}})
    assert main(["train", "--config", str(bad)]) == 2
    assert "train.model.interlacer.arch" in capsys.readouterr().err
    unknown = write_config(tmp_path / "unknown.json", "gen", {"scenaro": "push"})
    assert main(["gen", "--config", str(unknown)]) == 2
    assert "gen.scenaro" in capsys.readouterr().err
    typed = write_config(tmp_path / "typed.json", "bench", {"counts": [4096, "x"]})
    assert main(["bench", "--config", str(typed)]) == 2
    assert "bench.counts[1]" in capsys.readouterr().err


def test_unsorted_bench_counts_rejected(tmp_path):
    cfg = write_config(tmp_path / "b.json", "bench", {"counts": [512, 256]})
    assert main(["bench", "--config", str(cfg)]) == 2


def test_unwritable_output_is_an_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    cfg = write_config(tmp_path / "g.json", "gen", {"count": 1, "split": {"train": 1.0}})
    assert main(["gen", "--config", str(cfg), "--out", str(blocker / "sub")]) == 3


# ---------------------------------------------------------------------------
# gen / eval / render
# ---------------------------------------------------------------------------


def test_gen_single_spec_gives_one_snippet(tmp_path, capsys):
    cfg = write_config(tmp_path / "g.json", "gen", {"count": 1, "steps": 8, "split": {"train": 1.0}})
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d"), "--seed", "5"]) == 0
    assert lines(capsys)[-1]["counts"] == {"train": 1}
    assert len(list((tmp_path / "d").glob("*.traj"))) == 1
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["scenario"] == "push" and manifest["seeds"]["train"] == [5]


def test_gen_is_deterministic(tmp_path):
    cfg = write_config(tmp_path / "g.json", "gen", {"count": 2, "steps": 8, "scenario": "grasp",
                                                    "split": {"train": 0.5, "test": 0.5}})
    for name in ("a", "b"):
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    for f in sorted((tmp_path / "a").glob("*.traj")):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


@pytest.fixture
def blank_checkpoint(tmp_path):
    """An untrained model whose renderer sees empty space everywhere."""
    model = WorldModel(ModelConfig(particles=256), 0)
    last = model.field.mlp.layers[-1]
    last.weight.data[:, 0] = 0.0
    last.bias.data[0] = -200.0
    return save_model(model, tmp_path / "ckpt" / "model", {"scenario": "push"})


def test_render_blank_model_writes_white_images(tmp_path, blank_checkpoint, capsys):
    traj = generate_trajectory(push_spec(3, push=0.1), 4)
    write_trajectory(tmp_path / "t.traj", traj)
    cfg = write_config(tmp_path / "r.json", "render", {"checkpoint": str(blank_checkpoint), "rollout": 2,
                                                       "trajectory": str(tmp_path / "t.traj"), "image_size": 12})
    assert main(["render", "--config", str(cfg), "--out", str(tmp_path / "img")]) == 0
    names = sorted(p.name for p in (tmp_path / "img").glob("*.ppm"))
    preds = [n for n in names if n.startswith("pred_")]
    assert preds == ["pred_k1_view0.ppm", "pred_k1_view1.ppm", "pred_k2_view0.ppm", "pred_k2_view1.ppm"]
    assert "recon_t0_view0.ppm" in names and "truth_pred_k2_view1.ppm" in names
    for n in names:
        img = read_ppm(tmp_path / "img" / n)
        assert img.shape == (12, 12, 3)
        if not n.startswith("truth_"):
            assert np.all(img == 1.0)
    assert lines(capsys)[-1]["images"] == len(names)


def test_render_requires_trajectory(tmp_path, blank_checkpoint):
    cfg = write_config(tmp_path / "r.json", "render", {"checkpoint": str(blank_checkpoint)})
    assert main(["render", "--config", str(cfg), "--out", str(tmp_path / "img")]) == 2


def test_eval_with_oracle_dynamics_has_zero_particle_error(tmp_path, blank_checkpoint):
    make_dataset([push_spec(s, push=0.1) for s in (1, 2)], {"train": 0.5, "test": 0.5}, tmp_path / "d")
    cfg = write_config(tmp_path / "e.json", "eval", {"checkpoint": str(blank_checkpoint), "data": str(tmp_path / "d"),
                                                     "oracle": True, "rays_per_view": 8})
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "ev")]) == 0
    result = json.loads((tmp_path / "ev" / "eval.json").read_text())
    assert max(result["particle_mse_per_step"]) <= 1e-10
    with open(tmp_path / "ev" / "eval.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["k"]) for r in rows] == [1, 2, 3, 4, 5, 6]


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------


def test_plan_goal_zero_ranks_static_candidate_first():
    ranked = cmd_plan(PlanConfig(goal=0.0, oracle=True))
    assert ranked[0]["candidate"] == 0.0 and ranked[0]["rank"] == 1
    assert ranked[0]["cost"] == pytest.approx(0.0, abs=1e-12)


def test_plan_goal_0125_with_oracle_orders_by_distance(tmp_path):
    ranked = cmd_plan(PlanConfig(goal=0.125, oracle=True), tmp_path)
    assert ranked[0]["candidate"] == 0.125
    dist = [abs(r["candidate"] - 0.125) for r in ranked]
    rho = stats.spearmanr(dist, [r["cost"] for r in ranked]).statistic
    assert rho > 0.99
    with open(tmp_path / "plan.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["rank"]) for r in rows] == list(range(1, 12))


def test_grasp_cost_nondecreasing_beyond_half_width():
    offsets = [round(0.005 * i, 3) for i in range(9)]
    ranked = cmd_plan(PlanConfig(scenario="grasp", goal=0.2, candidates=offsets, oracle=True))
    cost = {r["candidate"]: r["cost"] for r in ranked}
    outside = [cost[o] for o in offsets if o > 0.02]
    assert all(b >= a for a, b in zip(outside, outside[1:]))
    assert max(cost[o] for o in offsets if o <= 0.02) < min(outside)


def test_plan_rejects_scenario_mismatch(tmp_path, blank_checkpoint):
    with pytest.raises(ValidationError):
        cmd_plan(PlanConfig(checkpoint=str(blank_checkpoint), scenario="grasp"))
    cfg = write_config(tmp_path / "p.json", "plan", {"checkpoint": str(blank_checkpoint), "scenario": "grasp"})
    assert main(["plan", "--config", str(cfg), "--out", str(tmp_path / "p")]) == 2


# ---------------------------------------------------------------------------
# benchmarks
# ---------------------------------------------------------------------------


def test_small_bench_report_round_trip(tmp_path, capsys):
    cfg = write_config(tmp_path / "b.json", "bench", {"counts": [128, 256, 512], "repetitions": 5, "warmup": 2})
    assert main(["bench", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    out = lines(capsys)
    assert len(out) == 3 * 3 + 1
    report = ScalingReport.from_csv(tmp_path / "b" / "scaling.csv")
    assert [(r.arch, r.n) for r in report.rows] == [(a, n) for a in ("quadratic-pct", "performer-pct", "interlacer")
                                                    for n in (128, 256, 512)]
    assert all(r.status == "ok" and r.peak_bytes > 0 and r.median_seconds > 0 for r in report.rows)
    script = (tmp_path / "b" / "scaling.gp").read_text()
    assert "scaling.csv" in script and "interlacer" in script


def test_bench_records_at_least_five_timed_repetitions():
    report = cmd_bench(BenchConfig(archs=["performer-pct"], counts=[64], repetitions=5, warmup=2))
    assert len(report.rows[0].times) == 5
    assert report.rows[0].median_seconds == float(np.median(report.rows[0].times))


def test_memory_budget_marks_rows_infeasible():
    cfg = BenchConfig(archs=["quadratic-pct"], counts=[64, 128, 256], memory_budget=1, memory_probe=False)
    rows = cmd_bench(cfg).rows
    assert rows[0].status == "ok"
    assert [r.status for r in rows[1:]] == ["infeasible", "infeasible"]
    assert "memory budget" in rows[1].reason


def test_time_budget_probe_reports_memory_once():
    cfg = BenchConfig(archs=["quadratic-pct"], counts=[64, 128, 256], time_budget=0.0)
    rows = cmd_bench(cfg).rows
    assert rows[1].status == "infeasible" and rows[1].peak_bytes > rows[0].peak_bytes
    assert "untimed run" in rows[1].reason and rows[2].peak_bytes is None


def test_out_of_memory_is_data_not_a_crash(monkeypatch):
    def boom(*a, **k):
        raise MemoryError

    monkeypatch.setattr(bench, "measure", boom)
    rows = cmd_bench(BenchConfig(archs=["interlacer"], counts=[64, 128])).rows
    assert [r.status for r in rows] == ["infeasible", "infeasible"]
    assert rows[0].reason == "out of memory"


def test_report_fits():
    rows = [ScalingRow("a", n, 1e-6 * n ** 2, 100 * n + 7) for n in (1000, 2000, 4000, 8000)]
    rows.append(ScalingRow("a", 16000, status="infeasible"))
    rep = ScalingReport(rows)
    assert rep.time_slope("a") == pytest.approx(2.0, abs=1e-9)
    assert rep.memory_r2("a") == pytest.approx(1.0, abs=1e-12)
    assert rep.peak("a", 16000) is None and rep.peak("a", 2000) == 200_007


def test_report_csv_is_rewritten_atomically(tmp_path):
    rep = ScalingReport([ScalingRow("a", 10, 0.5, 80, 2.0), ScalingRow("a", 20, status="infeasible", reason="x")])
    write_report(rep, tmp_path)
    write_report(rep, tmp_path)
    back = ScalingReport.from_csv(tmp_path / "scaling.csv")
    assert [(r.n, r.median_seconds, r.peak_bytes, r.status) for r in back.rows] == [
        (10, 0.5, 80, "ok"), (20, None, None, "infeasible")]
    assert not list(tmp_path.glob("*.tmp"))
    script = gnuplot_script("s.csv", ["a"]).splitlines()
    assert sum(line.startswith("plot ") for line in script) == 2


# ---------------------------------------------------------------------------
# smoke training run
# ---------------------------------------------------------------------------


def test_smoke_training_reduces_loss(tmp_path, capsys):
    make_dataset([push_spec(s, push=0.1, hold_steps=1) for s in (1, 2)], {"train": 0.5, "test": 0.5},
                 tmp_path / "d", extra={"scenario": "push"})
    cfg = write_config(tmp_path / "t.json", "train", {
        "data": str(tmp_path / "d"), "steps": 100, "batch_size": 1, "lr_values": [1e-3, 1e-3, 1e-3],
        "log_every": 1, "eval_every": 100, "eval_snippets": 1, "eval_rays_per_view": 16,
        "checkpoint_every": 100})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    logged = [r for r in lines(capsys) if "loss" in r]
    assert logged[0]["step"] == 1 and logged[-1]["step"] == 100
    assert logged[-1]["loss"] < logged[0]["loss"]
    assert (tmp_path / "run" / "model.json").exists() and (tmp_path / "run" / "metrics.csv").exists()
