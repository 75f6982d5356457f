"""Wall-time and logical-memory scaling of one dynamics step versus particle count."""

from __future__ import annotations

import csv
import gc
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import BenchConfig
from .interlacer import Interlacer, InterlacerConfig
from .state import KinematicSkeleton, ParticleState
from .tensor import track_memory

CSV_FIELDS = ["arch", "n", "median_seconds", "peak_bytes", "steps_per_sec", "status", "reason"]


@dataclass
class ScalingRow:
    arch: str
    n: int
    median_seconds: float | None = None
    peak_bytes: int | None = None
    steps_per_sec: float | None = None
    status: str = "ok"
    reason: str = ""
    times: list = field(default_factory=list, repr=False)


@dataclass
class ScalingReport:
    rows: list[ScalingRow]

    def feasible(self, arch: str) -> list[ScalingRow]:
        return [r for r in self.rows if r.arch == arch and r.status == "ok"]

    def time_slope(self, arch: str) -> float:
        """Least-squares slope of log(time) against log(N) over the feasible rows."""
        rows = self.feasible(arch)
        if len(rows) < 2:
            return float("nan")
        return float(np.polyfit(np.log([r.n for r in rows]), np.log([r.median_seconds for r in rows]), 1)[0])

    def memory_r2(self, arch: str) -> float:
        """R^2 of an ordinary linear fit of peak bytes against N."""
        rows = self.feasible(arch)
        if len(rows) < 3:
            return float("nan")
        x = np.array([r.n for r in rows], float)
        y = np.array([r.peak_bytes for r in rows], float)
        fit = np.polyval(np.polyfit(x, y, 1), x)
        return float(1 - np.sum((y - fit) ** 2) / np.sum((y - y.mean()) ** 2))

    def peak(self, arch: str, n: int) -> int | None:
        """Peak bytes at ``n``, including single-run probes of rows too slow to time."""
        for r in self.rows:
            if r.arch == arch and r.n == n and r.peak_bytes is not None:
                return r.peak_bytes
        return None

    def to_csv(self, path: str | Path) -> None:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(CSV_FIELDS)
        for r in self.rows:
            w.writerow([r.arch, r.n, _fmt(r.median_seconds), _fmt(r.peak_bytes), _fmt(r.steps_per_sec),
                        r.status, r.reason])
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(buf.getvalue())
        tmp.replace(path)

    @classmethod
    def from_csv(cls, path: str | Path) -> "ScalingReport":
        rows = []
        with open(path) as fh:
            for rec in csv.DictReader(fh):
                rows.append(ScalingRow(
                    rec["arch"], int(rec["n"]),
                    float(rec["median_seconds"]) if rec["median_seconds"] else None,
                    int(rec["peak_bytes"]) if rec["peak_bytes"] else None,
                    float(rec["steps_per_sec"]) if rec["steps_per_sec"] else None,
                    rec["status"], rec["reason"]))
        return cls(rows)


def _fmt(v):
    if v is None:
        return ""
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def gnuplot_script(csv_name: str, archs: list[str]) -> str:
    lines = [
        "set datafile separator ','",
        "set logscale xy",
        "set key left top",
        "set xlabel 'particles'",
        "set terminal pngcairo size 1000,400",
        "set output 'scaling.png'",
        "set multiplot layout 1,2",
        "set ylabel 'seconds per dynamics step'",
    ]
    plots = [f"'{csv_name}' using (strcol(1) eq '{a}' && strcol(6) eq 'ok' ? $2 : 1/0):3 with linespoints title '{a}'"
             for a in archs]
    lines.append("plot " + ", \\\n     ".join(plots))
    lines.append("set ylabel 'peak logical bytes'")
    plots = [p.replace(":3 ", ":4 ") for p in plots]
    lines.append("plot " + ", \\\n     ".join(plots))
    lines.append("unset multiplot")
    return "\n".join(lines) + "\n"


def bench_inputs(n: int, num_joints: int, feature_dim: int, rng: np.random.Generator, dtype=np.float32):
    """Two random tabletop-sized states of ``n`` particles and a skeleton."""

    def state():
        pos = rng.uniform([-0.3, -0.3, 0.0], [0.3, 0.3, 0.2], (n, 3)).astype(dtype)
        feat = rng.normal(size=(n, feature_dim)).astype(dtype)
        return ParticleState(pos, feat)

    skel = KinematicSkeleton(rng.uniform(-0.3, 0.3, (3, num_joints, 3)))
    return [state(), state()], skel


def build_model(arch: str, seed: int, block_rows: int | None) -> Interlacer:
    cfg = InterlacerConfig(arch=arch, zero_head=False)
    model = Interlacer(cfg, np.random.default_rng(seed), dtype=np.float32)
    model.requires_grad_(False)
    if arch == "quadratic-pct":
        model.set_block_rows(block_rows)
    return model


def probe_memory(model: Interlacer, scenes, skel, seed: int) -> int:
    with track_memory() as meter:
        model(scenes, skel, seed=seed)
        return meter.peak


def measure(model: Interlacer, scenes, skel, reps: int, warmup: int, seed: int) -> tuple[list[float], int]:
    for i in range(warmup):
        model(scenes, skel, seed=seed + i)
    with track_memory() as meter:
        model(scenes, skel, seed=seed)
        peak = meter.peak
    times = []
    for i in range(reps):
        gc.collect()
        t0 = time.perf_counter()
        model(scenes, skel, seed=seed + i)
        times.append(time.perf_counter() - t0)
    return times, peak


def cmd_bench(cfg: BenchConfig, log=None) -> ScalingReport:
    """Median forward time and logical peak bytes per (architecture, N).

    Before each size the cost is extrapolated from the previous feasible
    size with the arch's nominal exponent; sizes projected beyond the budgets,
    or that run out of memory, become ``infeasible`` rows instead of being
    timed. With ``memory_probe`` set, the first size rejected only for time
    still gets one metered run so its peak bytes are reported.
    """
    rows = []
    for arch in cfg.archs:
        model = build_model(arch, cfg.seed, cfg.block_rows)
        exponent = 2.0 if arch == "quadratic-pct" else 1.0
        prev: ScalingRow | None = None
        probed = False
        for n in cfg.counts:
            if prev is not None:
                ratio = n / prev.n
                est_t = prev.median_seconds * ratio ** exponent
                est_m = prev.peak_bytes * ratio ** exponent
                reason = ""
                if est_m > cfg.memory_budget:
                    reason = f"projected {est_m:.3g} bytes exceeds memory budget {cfg.memory_budget:.3g}"
                elif est_t > cfg.time_budget:
                    reason = f"projected {est_t:.0f}s per step exceeds time budget {cfg.time_budget:.0f}s"
                if reason:
                    row = ScalingRow(arch, n, status="infeasible", reason=reason)
                    if cfg.memory_probe and not probed and est_m <= cfg.memory_budget:
                        probed = True
                        scenes, skel = bench_inputs(n, model.cfg.num_joints, model.cfg.feature_dim,
                                                    np.random.default_rng([cfg.seed, n]))
                        try:
                            row.peak_bytes = int(probe_memory(model, scenes, skel, cfg.seed))
                            row.reason += "; peak bytes from one untimed run"
                        except MemoryError:
                            row.reason += "; memory probe ran out of memory"
                        del scenes
                        gc.collect()
                    rows.append(row)
                    if log:
                        log(rows[-1])
                    continue
            scenes, skel = bench_inputs(n, model.cfg.num_joints, model.cfg.feature_dim,
                                        np.random.default_rng([cfg.seed, n]))
            try:
                times, peak = measure(model, scenes, skel, cfg.repetitions, cfg.warmup, cfg.seed)
            except MemoryError:
                rows.append(ScalingRow(arch, n, status="infeasible", reason="out of memory"))
                if log:
                    log(rows[-1])
                continue
            finally:
                del scenes
                gc.collect()
            med = float(np.median(times))
            row = ScalingRow(arch, n, med, int(peak), 1.0 / med if med > 0 else math.inf, times=times)
            rows.append(row)
            prev = row
            if log:
                log(row)
    return ScalingReport(rows)


def write_report(report: ScalingReport, out_dir: str | Path, gnuplot: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "scaling.csv"
    report.to_csv(path)
    if gnuplot:
        archs = list(dict.fromkeys(r.arch for r in report.rows))
        (out / "scaling.gp").write_text(gnuplot_script(path.name, archs))
    return path
