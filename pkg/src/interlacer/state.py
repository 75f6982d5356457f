"""Particle states, kinematic skeletons and dynamics deltas."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .tensor import Tensor, as_tensor


@dataclass
class ParticleState:
    """Positions (N x 3, metres) and latent features (N x f) at one timestep.

    ``source_ids`` maps each particle to the raw point it was sampled from,
    which lets evaluation compare against the synthetic oracle.
    """

    positions: Tensor
    features: Tensor
    timestep_tag: int = 0
    source_ids: np.ndarray | None = None
    resampled: bool = False

    def __post_init__(self):
        self.positions = as_tensor(self.positions)
        self.features = as_tensor(self.features)
        p, f = self.positions.shape, self.features.shape
        if len(p) != 2 or p[1] != 3:
            raise DimensionError(f"positions must be N x 3, got {p}")
        if len(f) != 2 or f[0] != p[0]:
            raise DimensionError(f"features {f} do not match positions {p}")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def detach(self) -> "ParticleState":
        return ParticleState(self.positions.detach(), self.features.detach(), self.timestep_tag,
                             self.source_ids, self.resampled)

    def permuted(self, perm: np.ndarray) -> "ParticleState":
        src = None if self.source_ids is None else self.source_ids[perm]
        return ParticleState(Tensor(self.positions.data[perm]), Tensor(self.features.data[perm]),
                             self.timestep_tag, src, self.resampled)


@dataclass
class KinematicSkeleton:
    """Joint positions for the three timesteps ``T-2, T-1, T`` (shape 3 x J x 3).

    Each kinematic particle carries ``one_hot(joint) ++ one_hot(timestep)``.
    """

    joints: np.ndarray

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.joints.ndim != 3 or self.joints.shape[0] != 3 or self.joints.shape[2] != 3:
            raise DimensionError(f"skeleton joints must be 3 x J x 3, got {self.joints.shape}")
        if not np.isfinite(self.joints).all():
            raise ValidationError("skeleton joints must be finite")

    @property
    def num_joints(self) -> int:
        return self.joints.shape[1]

    @property
    def positions(self) -> np.ndarray:
        return self.joints.reshape(-1, 3)

    @property
    def features(self) -> np.ndarray:
        j = self.num_joints
        joint_hot = np.tile(np.eye(j), (3, 1))
        time_hot = np.repeat(np.eye(3), j, axis=0)
        return np.concatenate([joint_hot, time_hot], axis=1)

    @classmethod
    def from_sequence(cls, joints_per_step: np.ndarray, t: int) -> "KinematicSkeleton":
        """Triple ending at step ``t`` from a (steps x J x 3) joint track."""
        if t < 2:
            raise ValidationError(f"skeleton needs two previous steps, got t={t}")
        return cls(np.asarray(joints_per_step)[t - 2:t + 1])


@dataclass
class DynamicsDelta:
    dpos: Tensor
    dfeat: Tensor

    def __post_init__(self):
        if self.dpos.shape[0] != self.dfeat.shape[0]:
            raise DimensionError(f"delta rows differ: {self.dpos.shape} vs {self.dfeat.shape}")
