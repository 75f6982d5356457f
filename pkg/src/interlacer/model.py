"""The full encode -> dynamics -> render world model and its checkpoints."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import ModelConfig, from_dict, to_dict
from .errors import ValidationError
from .interlacer import Interlacer, read_params, save_params
from .nn import Module
from .render import KernelBank, RadianceField
from .world import Encoder


class WorldModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int | None = None):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        f = cfg.interlacer.feature_dim
        self.encoder = Encoder(cfg.descriptor_dim, rng, f, cfg.encoder_hidden, dtype=dtype)
        self.dynamics = Interlacer(cfg.interlacer, rng, dtype=dtype)
        self.field = RadianceField(len(cfg.kernel_radii) * f, rng, cfg.field_width, cfg.field_layers,
                                   cfg.density_scale, cfg.density_bias, dtype=dtype)

    @property
    def kernels(self) -> KernelBank:
        c = self.cfg
        return KernelBank(tuple(c.kernel_radii), tuple(c.kernel_bandwidths), c.kernel_neighbors)

    @property
    def workspace(self):
        return self.cfg.workspace


def save_model(model: WorldModel, path: str | Path, meta: dict | None = None) -> Path:
    info = dict(meta or {})
    info["model"] = to_dict(model.cfg)
    return save_params(model, path, info)


def load_model(path: str | Path) -> tuple[WorldModel, dict]:
    path = Path(path)
    if not path.with_suffix(".json").exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {path.with_suffix('.json')}")
    state, meta = read_params(path)
    if "model" not in meta:
        raise ValidationError(f"{path}: checkpoint lacks a model configuration")
    cfg = from_dict(ModelConfig, meta["model"], "model")
    model = WorldModel(cfg, 0)
    dtype = np.dtype(cfg.dtype)
    try:
        model.load_state_dict({k: v.astype(dtype) for k, v in state.items()})
    except (KeyError, ValueError) as e:
        raise ValidationError(f"{path}: checkpoint does not fit its configuration: {e}") from None
    return model, meta
