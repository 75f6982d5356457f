"""Point-conditioned volume renderer.

Each ray sample gathers its 16 nearest particles, summarises their
features with Gaussian annular kernels, and a small MLP turns the summary
into density and colour. Samples are alpha-composited front to back over
a white background.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError
from .nn import MLP, Module
from .spatial import PointIndex
from .state import ParticleState
from .tensor import Tensor, as_tensor, cumsum, scatter_rows

NEAR, FAR = 0.1, 2.0
SUMMARY_EPS = 1e-8


@dataclass(frozen=True)
class KernelBank:
    radii: tuple = (0.0, 0.01, 0.02, 0.05)
    bandwidths: tuple = (0.01, 0.01, 0.01, 0.05)
    neighbors: int = 16

    def __post_init__(self):
        r, b = np.asarray(self.radii), np.asarray(self.bandwidths)
        if len(r) != len(b) or len(r) < 1:
            raise ValidationError("kernel radii and bandwidths must have equal nonzero length")
        if np.any(np.diff(r) <= 0):
            raise ValidationError("kernel radii must be strictly increasing")
        if np.any(b <= 0):
            raise ValidationError("kernel bandwidths must be positive")
        if self.neighbors < 1:
            raise ValidationError("kernel neighbour budget must be >= 1")

    @property
    def count(self) -> int:
        return len(self.radii)


@dataclass
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    targets: np.ndarray | None = None

    def __post_init__(self):
        self.origins = np.atleast_2d(np.asarray(self.origins, dtype=np.float64))
        d = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        if self.origins.shape != d.shape or d.shape[1] != 3:
            raise DimensionError(f"ray origins {self.origins.shape} and directions {d.shape} must be R x 3")
        lengths = np.linalg.norm(d, axis=1)
        if np.any(lengths == 0):
            raise ValidationError("ray direction of zero length")
        self.directions = d / lengths[:, None]
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64).reshape(len(d), 3)

    def __len__(self) -> int:
        return len(self.origins)

    def subset(self, idx) -> "RayBatch":
        t = None if self.targets is None else self.targets[idx]
        return RayBatch(self.origins[idx], self.directions[idx], t)


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------


@dataclass
class Camera:
    """Pinhole camera looking from ``eye`` at ``target``; ``fov`` is vertical, in degrees."""

    eye: tuple
    target: tuple = (0.0, 0.0, 0.05)
    up: tuple = (0.0, 0.0, 1.0)
    width: int = 48
    height: int = 48
    fov: float = 35.0

    def frame(self) -> np.ndarray:
        eye = np.asarray(self.eye, float)
        fwd = np.asarray(self.target, float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, float))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return np.stack([right, down, fwd])

    def rays(self, pixels: np.ndarray | None = None) -> RayBatch:
        """Rays through pixel centres; ``pixels`` holds flat row-major indices."""
        if pixels is None:
            pixels = np.arange(self.width * self.height)
        pixels = np.asarray(pixels)
        row, col = np.divmod(pixels, self.width)
        f = 0.5 * self.height / np.tan(np.radians(self.fov) / 2)
        x = (col + 0.5 - self.width / 2) / f
        y = (row + 0.5 - self.height / 2) / f
        local = np.stack([x, y, np.ones_like(x)], axis=1)
        dirs = local @ self.frame()
        return RayBatch(np.broadcast_to(np.asarray(self.eye, float), dirs.shape), dirs)

    def to_dict(self) -> dict:
        return {"eye": list(self.eye), "target": list(self.target), "up": list(self.up),
                "width": self.width, "height": self.height, "fov": self.fov}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(tuple(d["eye"]), tuple(d.get("target", (0, 0, 0.05))), tuple(d.get("up", (0, 0, 1))),
                   int(d.get("width", 48)), int(d.get("height", 48)), float(d.get("fov", 35.0)))


def default_cameras(width: int = 48, height: int = 48) -> list[Camera]:
    return [
        Camera((0.75, 0.0, 0.55), width=width, height=height),
        Camera((0.0, 0.75, 0.55), width=width, height=height),
    ]


# ---------------------------------------------------------------------------
# Sampling and aggregation
# ---------------------------------------------------------------------------


def sample_depths(count: int, n_samples: int, near: float = NEAR, far: float = FAR, rng=None) -> np.ndarray:
    """Stratified depths: sample k of every ray lies in bin k of ``[near, far]``.

    Without an ``rng`` every sample sits at its bin centre.
    """
    if not near < far:
        raise ValidationError(f"need near < far, got {near}, {far}")
    if n_samples < 1:
        raise ValidationError("need at least one sample per ray")
    width = (far - near) / n_samples
    u = np.full((count, n_samples), 0.5) if rng is None else rng.random((count, n_samples))
    return near + (np.arange(n_samples) + u) * width


def sample_ray(origin, direction, near: float = NEAR, far: float = FAR, n_samples: int = 32, rng=None):
    """Sample points along one ray; returns ``(points n x 3, depths n)``."""
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    t = sample_depths(1, n_samples, near, far, rng)[0]
    return np.asarray(origin, float) + t[:, None] * d, t


def aggregate_features(samples: np.ndarray, state: ParticleState, index: PointIndex | None = None,
                       kb: KernelBank = KernelBank()) -> Tensor:
    """Annular-kernel summaries (S x count*f) of the particles around each sample.

    For annulus a, ``w = exp(-(dist - r_a)^2 / (2 bw_a^2))`` over the nearest
    particles, and block a is ``sum(w f) / (sum(w) + eps)``. Differentiable
    in both particle positions and features.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if state.n < 1:
        raise ValidationError("cannot aggregate over an empty state")
    index = index or PointIndex(state.positions.data)
    k = min(kb.neighbors, state.n)
    nbr, _ = index.query(samples, k)  # S x k

    pos_t, feat_t = state.positions, state.features
    dtype = feat_t.dtype
    radii = np.asarray(kb.radii, dtype)
    bw2 = np.asarray(kb.bandwidths, dtype) ** 2
    diff = samples.astype(dtype)[:, None, :] - pos_t.data[nbr]  # S x k x 3
    dist = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2)  # S x k
    off = dist[..., None] - radii  # S x k x A
    w = np.exp(-(off * off) / (2 * bw2))
    nf = feat_t.data[nbr]  # S x k x f
    den = w.sum(1) + SUMMARY_EPS  # S x A
    wt = w.transpose(0, 2, 1)  # S x A x k
    num = wt @ nf
    out = num / den[..., None]
    s, a, f = out.shape

    def back(g):
        g = g.reshape(s, a, f)
        gnum = g / den[..., None]
        gden = -(g * out).sum(-1) / den
        gpos = gfeat = None
        if feat_t.requires_grad:
            gfeat = scatter_rows(nbr, w @ gnum, feat_t.shape[0])
        if pos_t.requires_grad:
            gw = nf @ gnum.transpose(0, 2, 1) + gden[:, None, :]
            gdist = (gw * w * (-off / bw2)).sum(-1)  # S x k
            safe = np.where(dist > 0, dist, 1.0)
            gdiff = np.where(dist[..., None] > 0, gdist[..., None] * diff / safe[..., None], 0.0)
            gpos = scatter_rows(nbr, -gdiff, pos_t.shape[0])
        return gpos, gfeat

    return Tensor._make(out.reshape(s, a * f), (pos_t, feat_t), back, "aggregate")


# ---------------------------------------------------------------------------
# Radiance field and compositing
# ---------------------------------------------------------------------------


class RadianceField(Module):
    """MLP from a kernel summary to (density, rgb).

    Density is ``scale * softplus(raw)``; ``density_bias`` sets the initial
    emptiness of space.
    """

    def __init__(self, summary_dim: int, rng: np.random.Generator, width: int = 64, layers: int = 4,
                 density_scale: float = 10.0, density_bias: float = -3.0, dtype=np.float64):
        self.mlp = MLP([summary_dim] + [width] * (layers - 1) + [4], rng, dtype=dtype)
        self.mlp.layers[-1].bias.data[0] = density_bias
        self._density_scale = density_scale

    def __call__(self, summary: Tensor) -> tuple[Tensor, Tensor]:
        raw = self.mlp(summary)
        return raw[:, 0].softplus().scale(self._density_scale), raw[:, 1:].sigmoid()


@dataclass
class RenderResult:
    color: Tensor  # R x 3
    weights: np.ndarray  # R x S compositing weights
    background: np.ndarray  # R residual transmittance
    depths: np.ndarray = field(repr=False, default=None)


def composite(density: Tensor, rgb: Tensor, depths: np.ndarray, far: float = FAR) -> RenderResult:
    """Front-to-back alpha compositing over a white background.

    ``density`` is R x S, ``rgb`` R x S x 3; the last interval runs to ``far``.
    """
    density, rgb = as_tensor(density), as_tensor(rgb)
    r, s = density.shape
    delta = np.diff(np.concatenate([depths, np.full((r, 1), far)], axis=1), axis=1).astype(density.dtype)
    optical = density * Tensor(delta)
    trans = (-cumsum(optical, axis=1, exclusive=True)).exp()
    alpha = 1.0 - (-optical).exp()
    w = trans * alpha
    background = (-optical.sum(axis=1)).exp()
    color = (w.reshape(r, s, 1) * rgb).sum(axis=1) + background.reshape(r, 1)
    return RenderResult(color, w.data, background.data, depths)


def render_rays(rays: RayBatch, state: ParticleState, field_: RadianceField, kb: KernelBank = KernelBank(),
                n_samples: int = 32, near: float = NEAR, far: float = FAR, rng=None,
                index: PointIndex | None = None) -> RenderResult:
    depths = sample_depths(len(rays), n_samples, near, far, rng)
    pts = rays.origins[:, None, :] + depths[..., None] * rays.directions[:, None, :]
    summary = aggregate_features(pts.reshape(-1, 3), state, index, kb)
    density, rgb = field_(summary)
    r = len(rays)
    return composite(density.reshape(r, n_samples), rgb.reshape(r, n_samples, 3), depths, far)


def pixel_loss(pred: Tensor, target) -> Tensor:
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"pixel_loss: prediction {pred.shape} vs target {target.shape}")
    return (pred - Tensor(target)).square().mean()


def render_image(camera: Camera, state: ParticleState, field_: RadianceField, kb: KernelBank = KernelBank(),
                 n_samples: int = 32, chunk: int = 1024) -> np.ndarray:
    """Full H x W x 3 image (no graph is recorded for constant parameters)."""
    rays = camera.rays()
    index = PointIndex(state.positions.data)
    out = np.empty((len(rays), 3))
    for i in range(0, len(rays), chunk):
        sl = slice(i, i + chunk)
        out[sl] = render_rays(rays.subset(sl), state, field_, kb, n_samples, index=index).color.data
    return out.reshape(camera.height, camera.width, 3)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 with 8-bit channels; ``image`` is H x W x 3 in [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"image must be H x W x 3, got {img.shape}")
    h, w, _ = img.shape
    data = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, dims, _, data = raw.split(b"\n", 3)
    if magic != b"P6":
        raise ValidationError(f"{path}: not a binary PPM")
    w, h = map(int, dims.split())
    return np.frombuffer(data[: w * h * 3], np.uint8).reshape(h, w, 3).astype(np.float64) / 255
