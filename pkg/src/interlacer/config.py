"""JSON run configurations, validated field by field.

Every error carries the dotted path of the offending field, e.g.
``train.model.interlacer.arch``.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .interlacer import InterlacerConfig


def _check(tp, value, path):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        options = typing.get_args(tp)
        if value is None and type(None) in options:
            return None
        errors = []
        for opt in options:
            if opt is type(None):
                continue
            try:
                return _check(opt, value, path)
            except ConfigError as e:
                errors.append(e)
        raise errors[0]
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        args = typing.get_args(tp)
        inner = args[0] if args else typing.Any
        items = [_check(inner, v, f"{path}[{i}]") for i, v in enumerate(value)]
        return items if origin is list else tuple(items)
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {type(value).__name__}")
        return dict(value)
    if tp is typing.Any:
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from a JSON object, rejecting unknown or ill-typed fields."""
    if not isinstance(data, dict):
        raise ConfigError(path or cls.__name__, f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            sub = f"{path}.{f.name}" if path else f.name
            kwargs[f.name] = _check(hints[f.name], data[f.name], sub)
    try:
        obj = cls(**kwargs)
    except ConfigError as e:
        # field paths raised by the class itself are relative to it
        raise ConfigError(f"{path}.{e.path}" if path else e.path, e.message) from None
    except (TypeError, ValueError) as e:
        raise ConfigError(path or cls.__name__, str(e)) from None
    validate = getattr(obj, "validate", None)
    if validate:
        validate(path)
    return obj


def load_config(cls, path: str | Path, section: str | None = None):
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(str(path), f"invalid JSON: {e}") from None
    if section is not None and isinstance(raw, dict) and section in raw:
        raw = raw[section]
    return from_dict(cls, raw, section or "")


def to_dict(obj) -> dict:
    return dataclasses.asdict(obj)


def _positive(path, name, value):
    if value <= 0:
        raise ConfigError(f"{path}.{name}" if path else name, f"must be positive, got {value}")


# ---------------------------------------------------------------------------
# Run configurations
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    interlacer: InterlacerConfig = field(default_factory=InterlacerConfig)
    descriptor_dim: int = 6
    encoder_hidden: int = 32
    particles: int = 2048
    field_width: int = 64
    field_layers: int = 4
    density_scale: float = 10.0
    density_bias: float = -3.0
    kernel_radii: list[float] = field(default_factory=lambda: [0.0, 0.01, 0.02, 0.05])
    kernel_bandwidths: list[float] = field(default_factory=lambda: [0.01, 0.01, 0.01, 0.05])
    kernel_neighbors: int = 16
    samples_per_ray: int = 32
    workspace: list[list[float]] = field(default_factory=lambda: [[-0.4, -0.4, -0.01], [0.4, 0.4, 0.5]])
    dtype: str = "float32"

    def validate(self, path=""):
        _positive(path, "particles", self.particles)
        _positive(path, "samples_per_ray", self.samples_per_ray)
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"{path}.dtype" if path else "dtype", "must be float32 or float64")


@dataclass
class TrainConfig:
    data: str = "data"
    model: ModelConfig = field(default_factory=ModelConfig)
    steps: int = 20000
    batch_size: int = 4
    rollout: int = 6
    rays_per_view: int = 128
    lr_values: list[float] = field(default_factory=lambda: [3e-4, 1e-4, 3e-5])
    lr_boundaries: list[int] | None = None  # default: 1% and 50% of ``steps``
    weight_decay: float = 1e-3
    clip_norm: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    aux_particle_loss: bool = False
    aux_weight: float = 1000.0
    log_every: int = 10
    eval_every: int = 1000
    eval_snippets: int = 16
    eval_rays_per_view: int = 128
    checkpoint_every: int = 1000
    seed: int = 0

    def validate(self, path=""):
        for name in ("steps", "batch_size", "rollout", "rays_per_view", "log_every", "eval_every",
                     "checkpoint_every"):
            _positive(path, name, getattr(self, name))
        if len(self.lr_values) != 3:
            raise ConfigError(f"{path}.lr_values" if path else "lr_values", "need exactly three values")
        if self.lr_boundaries is not None and (len(self.lr_boundaries) != 2
                                               or self.lr_boundaries[0] > self.lr_boundaries[1]):
            raise ConfigError(f"{path}.lr_boundaries" if path else "lr_boundaries",
                              "need two nondecreasing step counts")


@dataclass
class GenConfig:
    scenario: str = "push"
    count: int = 250
    steps: int = 8
    split: dict = field(default_factory=lambda: {"train": 0.8, "test": 0.2})
    seed: int = 0
    joints: int = 5
    image_size: int = 48

    def validate(self, path=""):
        if self.scenario not in ("push", "grasp", "rigid"):
            raise ConfigError(f"{path}.scenario" if path else "scenario", "must be push, grasp or rigid")
        _positive(path, "count", self.count)
        if self.steps < 8:
            raise ConfigError(f"{path}.steps" if path else "steps", "need at least 8 steps per trajectory")


@dataclass
class EvalConfig:
    checkpoint: str = "run/model"
    data: str = "data"
    split: str = "test"
    snippets: int = 0  # 0 means all
    rollout: int = 6
    rays_per_view: int = 256
    seed: int = 0
    oracle: bool = False  # evaluate the analytic dynamics instead of the learned one

    def validate(self, path=""):
        _positive(path, "rollout", self.rollout)
        _positive(path, "rays_per_view", self.rays_per_view)


@dataclass
class BenchConfig:
    archs: list[str] = field(default_factory=lambda: ["quadratic-pct", "performer-pct", "interlacer"])
    counts: list[int] = field(default_factory=lambda: [4096, 16384, 32768, 65536, 131072])
    repetitions: int = 5
    warmup: int = 2
    seed: int = 0
    memory_budget: int = 8 * 2**30  # logical bytes per quadratic forward
    time_budget: float = 60.0  # seconds per repetition, estimated before running
    block_rows: int = 256
    memory_probe: bool = True
    gnuplot: bool = True

    def validate(self, path=""):
        from .interlacer import ARCHITECTURES
        for i, a in enumerate(self.archs):
            if a not in ARCHITECTURES:
                raise ConfigError(f"{path}.archs[{i}]" if path else f"archs[{i}]", f"unknown architecture {a!r}")
        if not self.counts or any(c <= 0 for c in self.counts) or list(self.counts) != sorted(self.counts):
            raise ConfigError(f"{path}.counts" if path else "counts", "must be positive and sorted")
        if self.repetitions < 5:
            raise ConfigError(f"{path}.repetitions" if path else "repetitions", "need at least 5")


@dataclass
class PlanConfig:
    checkpoint: str = "run/model"
    scenario: str = "push"
    goal: float = 0.125
    candidates: list[float] = field(default_factory=lambda: [round(-0.125 + 0.025 * i, 3) for i in range(11)])
    scene_seed: int = 1_000_000
    rollout: int = 6
    seed: int = 0
    oracle: bool = False  # rank with the analytic dynamics (no checkpoint needed)

    def validate(self, path=""):
        _positive(path, "rollout", self.rollout)
        if self.scenario not in ("push", "grasp"):
            raise ConfigError(f"{path}.scenario" if path else "scenario", "must be push or grasp")
        if not self.candidates:
            raise ConfigError(f"{path}.candidates" if path else "candidates", "need at least one candidate")


@dataclass
class RenderConfig:
    checkpoint: str = "run/model"
    trajectory: str = ""
    rollout: int = 6
    seed: int = 0
    image_size: int | None = None
