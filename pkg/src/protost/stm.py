"""Source transferability weighting.

Scores each labeled source pixel by how close its feature sits to the
unlabeled-domain prototypes, with a per-class entropy floor so rare classes
are not starved.  The weight decays to half at the dataset mean distance and
is clamped into (0, 1]; ignored pixels carry 0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .clustering import PrototypeSet, nearest_distances
from .dataio import FeatureMap, LabelMap, ProbMap, require_same_grid
from .errors import EmptyInputError, ShapeError, ValidationError

MEAN_DISTANCE_FLOOR = 1e-12
_LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class DistanceMap:
    """Per-pixel nearest-prototype distance."""

    distances: np.ndarray  # (H, W)

    def __post_init__(self):
        d = np.ascontiguousarray(self.distances, dtype=np.float64)
        if d.ndim != 2:
            raise ShapeError(f"distance map must be (H, W), got {d.shape}")
        if not np.all(np.isfinite(d)) or d.min(initial=0.0) < 0.0:
            raise ValidationError("distances must be finite and non-negative")
        d.flags.writeable = False
        object.__setattr__(self, "distances", d)

    @property
    def height(self) -> int:
        return self.distances.shape[0]

    @property
    def width(self) -> int:
        return self.distances.shape[1]


@dataclass(frozen=True)
class EntropyStats:
    """Per-class mean prediction entropy (nats) and its min-max normalization."""

    mean_entropy: np.ndarray  # (C,), NaN for classes never pseudo-labeled
    normalized: np.ndarray  # (C,) in [0, 1]
    counts: np.ndarray  # (C,)

    def __post_init__(self):
        e = np.ascontiguousarray(self.mean_entropy, dtype=np.float64)
        z = np.ascontiguousarray(self.normalized, dtype=np.float64)
        n = np.ascontiguousarray(self.counts, dtype=np.int64)
        if not (e.shape == z.shape == n.shape) or e.ndim != 1:
            raise ShapeError("entropy stats fields must be matching (C,) vectors")
        if z.min(initial=0.0) < 0.0 or z.max(initial=0.0) > 1.0:
            raise ValidationError("normalized entropies must lie in [0, 1]")
        for arr, name in ((e, "mean_entropy"), (z, "normalized"), (n, "counts")):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def classes(self) -> int:
        return self.mean_entropy.shape[0]


@dataclass(frozen=True)
class TransferabilityMap:
    """Per-pixel source weight in (0, 1]; 0 marks ignored pixels."""

    weights: np.ndarray  # (H, W)

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ShapeError(f"transferability map must be (H, W), got {w.shape}")
        if not np.all(np.isfinite(w)) or w.min(initial=0.0) < 0.0 or w.max(initial=0.0) > 1.0:
            raise ValidationError("weights must be finite and within [0, 1]")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def height(self) -> int:
        return self.weights.shape[0]

    @property
    def width(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def ones(cls, height: int, width: int) -> "TransferabilityMap":
        return cls(np.ones((height, width)))


def pixel_entropy(pred: ProbMap) -> np.ndarray:
    """Shannon entropy in nats per pixel; 0 log 0 counts as 0."""
    p = pred.flat()
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return -terms.sum(axis=1).reshape(pred.height, pred.width)


def class_entropy(
    target_preds: list[ProbMap], target_pls: list[LabelMap]
) -> EntropyStats:
    """Mean prediction entropy per pseudo-labeled class, min-max normalized.

    Classes that never occur get normalized entropy 1.0 (the strong floor);
    if all present classes tie, everyone gets 0.
    """
    if len(target_preds) != len(target_pls) or not target_preds:
        raise EmptyInputError("need matching, non-empty prediction and pseudo-label lists")
    classes = target_preds[0].classes
    sums = np.zeros(classes, dtype=np.float64)
    counts = np.zeros(classes, dtype=np.int64)
    for pred, pl in zip(target_preds, target_pls):
        require_same_grid(pred, pl)
        if pred.classes != classes:
            raise ShapeError("prediction maps disagree on the number of classes")
        ent = pixel_entropy(pred).reshape(-1)
        labels = pl.flat()
        valid = labels >= 0
        if labels.max(initial=-1) >= classes:
            raise ValidationError("pseudo labels outside the prediction class range")
        np.add.at(sums, labels[valid], ent[valid])
        np.add.at(counts, labels[valid], 1)
    if counts.sum() == 0:
        raise EmptyInputError("no labeled pixels to compute class entropies from")

    present = counts > 0
    mean_entropy = np.full(classes, np.nan)
    mean_entropy[present] = sums[present] / counts[present]
    normalized = np.ones(classes, dtype=np.float64)
    e_min = mean_entropy[present].min()
    e_max = mean_entropy[present].max()
    if e_max - e_min > 0.0:
        normalized[present] = (mean_entropy[present] - e_min) / (e_max - e_min)
    else:
        normalized[present] = 0.0
    return EntropyStats(mean_entropy=mean_entropy, normalized=normalized, counts=counts)


def distance_map(feat: FeatureMap, protos: PrototypeSet) -> DistanceMap:
    """Nearest-prototype distance for every pixel feature."""
    if feat.dim != protos.dim:
        raise ShapeError(f"features have dim {feat.dim}, prototypes have {protos.dim}")
    d = nearest_distances(feat.pixels(), protos)
    return DistanceMap(d.reshape(feat.height, feat.width))


def mean_distance(
    dmaps: list[DistanceMap], masks: list[np.ndarray] | None = None
) -> float:
    """Pooled mean pixel distance across the dataset, floored above zero.

    Optional boolean masks (True = include) drop ignore-labeled pixels from
    the pool.
    """
    if not dmaps:
        raise EmptyInputError("no distance maps")
    total = 0.0
    count = 0
    for i, dmap in enumerate(dmaps):
        d = dmap.distances
        if masks is not None:
            mask = np.asarray(masks[i], dtype=bool)
            if mask.shape != d.shape:
                raise ShapeError("mask resolution does not match its distance map")
            d = d[mask]
        total += float(d.sum())
        count += d.size
    if count == 0:
        raise EmptyInputError("no pixels contribute to the mean distance")
    mean = total / count
    if mean <= MEAN_DISTANCE_FLOOR:
        warnings.warn("mean prototype distance is degenerate; flooring it", RuntimeWarning)
        return MEAN_DISTANCE_FLOOR
    return mean


def transferability_map(
    dmap: DistanceMap, gt: LabelMap, stats: EntropyStats, d_mean: float
) -> TransferabilityMap:
    """Distance-decay weight with the class entropy as a lower bound.

    w = min(exp(-(D/d_mean)^2 * ln 2) + e'_class, 1), so the decay term is
    exactly 1/2 at the mean distance; ignored pixels get weight 0.
    """
    require_same_grid(dmap, gt)
    if d_mean <= 0.0:
        raise ValidationError(f"d_mean must be positive, got {d_mean}")
    labels = gt.flat()
    if labels.max(initial=-1) >= stats.classes:
        raise ValidationError("label map references a class unknown to the entropy stats")
    valid = labels >= 0
    d = dmap.distances.reshape(-1)
    decay = np.exp(-((d / d_mean) ** 2) * _LN2)
    floors = np.zeros_like(d)
    floors[valid] = stats.normalized[labels[valid]]
    weights = np.minimum(decay + floors, 1.0)
    weights[~valid] = 0.0
    return TransferabilityMap(weights.reshape(dmap.height, dmap.width))
