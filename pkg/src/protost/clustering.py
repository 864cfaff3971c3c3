"""Seeded K-Means over feature vectors.

Produces the unlabeled-domain prototype set and doubles as the warm start
for mixture fitting.  Everything is deterministic for a fixed seed: the
++-style init draws from one generator and cluster updates accumulate in a
fixed point order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, InsufficientDataError, NumericError, ShapeError

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 100


@dataclass(frozen=True)
class PrototypeSet:
    """Cluster centers kept as domain prototypes."""

    centers: np.ndarray  # (J, d)

    def __post_init__(self):
        centers = np.ascontiguousarray(self.centers, dtype=np.float64)
        if centers.ndim != 2 or centers.shape[0] < 1:
            raise ShapeError(f"centers must be (J>=1, d), got {centers.shape}")
        if not np.all(np.isfinite(centers)):
            raise NumericError("prototype centers contain non-finite entries")
        centers.flags.writeable = False
        object.__setattr__(self, "centers", centers)

    @property
    def count(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def _plusplus_init(points: np.ndarray, j: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((j, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, j):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            # all points coincide with a chosen center; fall back to uniform
            idx = rng.integers(n)
        centers[i] = points[idx]
        d2 = np.minimum(d2, ((points - centers[i]) ** 2).sum(axis=1))
    return centers


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(N, J) squared Euclidean distances, accumulated in double precision."""
    d2 = np.empty((points.shape[0], centers.shape[0]), dtype=np.float64)
    for jj in range(centers.shape[0]):
        d2[:, jj] = ((points - centers[jj]) ** 2).sum(axis=1)
    return d2


def kmeans(
    points: np.ndarray,
    j: int,
    seed: int,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> PrototypeSet:
    """Lloyd's algorithm with ++-style seeding.

    Stops when the relative objective improvement falls below tol or after
    max_iter rounds.  Empty clusters are repaired by promoting the point
    farthest from its current center.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError(f"points must be (N, d), got {points.shape}")
    n = points.shape[0]
    if n == 0:
        raise EmptyInputError("kmeans needs at least one point")
    if j < 1 or n < j:
        raise InsufficientDataError(f"kmeans needs at least {j} points, got {n}")

    rng = np.random.default_rng(seed)
    centers = _plusplus_init(points, j, rng)
    prev_obj = np.inf
    for _ in range(max_iter):
        d2 = _squared_distances(points, centers)
        labels = d2.argmin(axis=1)
        best = d2[np.arange(n), labels]

        counts = np.bincount(labels, minlength=j)
        for empty in np.flatnonzero(counts == 0):
            far = int(best.argmax())
            centers[empty] = points[far]
            labels[far] = empty
            best[far] = 0.0
            counts = np.bincount(labels, minlength=j)

        obj = float(best.sum())
        if obj > prev_obj * (1.0 + 1e-9) + 1e-30:
            raise NumericError("kmeans objective increased between iterations")
        converged = prev_obj - obj <= tol * abs(prev_obj) if np.isfinite(prev_obj) else False
        prev_obj = obj

        sums = np.zeros((j, points.shape[1]), dtype=np.float64)
        np.add.at(sums, labels, points)
        centers = sums / counts[:, None]
        if converged:
            break
    return PrototypeSet(centers)


def nearest_distance(f: np.ndarray, protos: PrototypeSet) -> float:
    """Minimum Euclidean distance from one vector to any prototype."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (protos.dim,):
        raise ShapeError(f"query has shape {f.shape}, prototypes have dim {protos.dim}")
    d2 = ((protos.centers - f) ** 2).sum(axis=1)
    return float(np.sqrt(d2.min()))


def nearest_distances(points: np.ndarray, protos: PrototypeSet) -> np.ndarray:
    """Per-row nearest-prototype distances for an (N, d) array."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != protos.dim:
        raise ShapeError(f"points of shape {points.shape} do not match dim {protos.dim}")
    best = np.full(points.shape[0], np.inf)
    for jj in range(protos.count):
        np.minimum(best, ((points - protos.centers[jj]) ** 2).sum(axis=1), out=best)
    return np.sqrt(best)
