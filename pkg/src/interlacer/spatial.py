"""Exact k-nearest-neighbour queries, anchor sampling and nearest-anchor assignment.

Results are ordered by ``(distance, particle id)``. Distances are recomputed
from coordinates with one fixed formula, so the kd-tree only proposes
candidates and never decides ties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError, ValidationError

# one extra candidate per query exposes any tie at the k-th slot
_MARGIN = 1


def distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Euclidean distances with one fixed evaluation order (x, then y, then z)."""
    d = points - query
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


@dataclass(frozen=True)
class AnchorSet:
    ids: np.ndarray  # sorted ascending

    @property
    def r(self) -> int:
        return len(self.ids)


class PointIndex:
    """Immutable kd-tree over N x 3 positions."""

    def __init__(self, positions: np.ndarray):
        pts = np.array(positions, dtype=np.float64)  # private copy; frozen below
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValidationError(f"positions must be N x 3, got {pts.shape}")
        if len(pts) < 1:
            raise ValidationError("cannot index an empty point set")
        bad = ~np.isfinite(pts).all(axis=1)
        if bad.any():
            raise ValidationError(f"non-finite coordinate at index {int(np.flatnonzero(bad)[0])}")
        self.positions = pts
        self.positions.setflags(write=False)
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.positions)

    def query(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Batched exact kNN: ``(ids, dists)`` each of shape Q x k."""
        n = len(self.positions)
        if not 1 <= k <= n:
            raise ContractError(f"knn: need 1 <= k <= N, got k={k}, N={n}")
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        kk = min(k + _MARGIN, n)
        tree_d, cand = self._tree.query(q, k=kk)
        cand = cand.reshape(len(q), kk)
        tree_d = tree_d.reshape(len(q), kk)
        d = distances(self.positions[cand], q[:, None, :])
        # rows already strictly increasing need no re-sort; the rest sort by (distance, id)
        messy = np.flatnonzero(~np.all(np.diff(d, axis=1) > 0, axis=1))
        if len(messy):
            order = np.lexsort((cand[messy], d[messy]), axis=-1)
            cand[messy] = np.take_along_axis(cand[messy], order, axis=1)
            d[messy] = np.take_along_axis(d[messy], order, axis=1)
        ids, dk = cand[:, :k].copy(), d[:, :k].copy()
        if kk < n:
            # a point outside the candidate set is at least tree_d[:, -1] away
            bound = tree_d[:, -1]
            unsafe = ~(d[:, k - 1] < bound * (1 - 1e-9) - 1e-12)
            for row in np.flatnonzero(unsafe):
                ids[row], dk[row] = self._ball_fallback(q[row], k, d[row, k - 1])
        return ids, dk

    def _ball_fallback(self, q: np.ndarray, k: int, radius: float):
        cand = np.asarray(self._tree.query_ball_point(q, radius * (1 + 1e-9) + 1e-12), dtype=np.intp)
        if len(cand) < k:
            cand = np.arange(len(self.positions))
        d = distances(self.positions[cand], q)
        order = np.lexsort((cand, d))[:k]
        return cand[order], d[order]

    def nearest(self, queries: np.ndarray) -> np.ndarray:
        return self.query(queries, 1)[0][:, 0]


def build_index(positions: np.ndarray) -> PointIndex:
    return PointIndex(positions)


def knn(index: PointIndex, query, k: int) -> list[tuple[int, float]]:
    """The ``k`` nearest indexed points to one query, as ``(id, distance)`` pairs."""
    ids, d = index.query(np.asarray(query, dtype=np.float64).reshape(1, 3), k)
    return [(int(i), float(x)) for i, x in zip(ids[0], d[0])]


def sample_anchors(n: int, rate_divisor: int = 4, seed=None) -> AnchorSet:
    """Draw ``ceil(n / rate_divisor)`` distinct ids uniformly at random."""
    if n < 1:
        raise ContractError(f"sample_anchors: need N >= 1, got {n}")
    r = -(-n // rate_divisor)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = np.sort(rng.choice(n, size=r, replace=False))
    return AnchorSet(ids)


def nearest_anchor(anchor_positions: np.ndarray | PointIndex, positions: np.ndarray,
                   anchor_ids: np.ndarray | None = None) -> np.ndarray:
    """Closest anchor for every position, ties broken by ascending anchor id.

    Returns positions into ``anchor_positions`` (or ``anchor_ids`` values when
    given). Anchors must be ordered by ascending id for the tie rule to hold.
    """
    index = anchor_positions if isinstance(anchor_positions, PointIndex) else PointIndex(anchor_positions)
    local = index.nearest(np.asarray(positions, dtype=np.float64))
    return local if anchor_ids is None else np.asarray(anchor_ids)[local]
