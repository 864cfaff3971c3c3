"""Pseudo-label assignment over target feature maps.

Three assigners share one output type: the mixture-density strategy backed
by per-class anisotropic mixtures, a single-centroid Euclidean baseline, and
a prediction-confidence baseline.  Every pixel ends up with exactly one
class or the ignore sentinel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import IGNORE_LABEL, FeatureMap, LabelMap, ProbMap, require_same_grid
from .errors import EmptyModelError, ShapeError, ValidationError
from .gmm import (
    SUBSAMPLE_CAP,
    ClassGmm,
    EmConfig,
    MapsModel,
    fit_gmm,
    log_mixture_density,
    subsample,
)

MIN_CLASS_SAMPLES = 50


@dataclass(frozen=True)
class PseudoLabelMap:
    """Per-pixel assigned class or ignore, plus the threshold that made it."""

    labels: np.ndarray  # (H, W)
    threshold: float
    classes: int

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if labels.ndim != 2:
            raise ShapeError(f"pseudo labels must be (H, W), got {labels.shape}")
        if labels.min(initial=0) < IGNORE_LABEL or labels.max(initial=-1) >= self.classes:
            raise ValidationError("pseudo labels outside [-1, classes)")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def as_label_map(self) -> LabelMap:
        return LabelMap(self.labels)


@dataclass(frozen=True)
class CentroidModel:
    """Single-centroid-per-class baseline prototype model."""

    classes: int
    centroids: dict[int, np.ndarray]

    def __post_init__(self):
        if not self.centroids:
            raise EmptyModelError("centroid model has no classes")
        dims = set()
        frozen = {}
        for cid, v in self.centroids.items():
            if not (0 <= cid < self.classes):
                raise ValidationError(f"class id {cid} outside [0, {self.classes})")
            v = np.ascontiguousarray(v, dtype=np.float64)
            if v.ndim != 1 or not np.all(np.isfinite(v)):
                raise ValidationError(f"centroid for class {cid} must be a finite vector")
            v.flags.writeable = False
            frozen[cid] = v
            dims.add(v.shape[0])
        if len(dims) != 1:
            raise ShapeError("centroids must share one dimensionality")
        object.__setattr__(self, "centroids", frozen)

    @property
    def dim(self) -> int:
        return next(iter(self.centroids.values())).shape[0]

    def present_classes(self) -> list[int]:
        return sorted(self.centroids)


def collect_class_features(
    feat: FeatureMap, pred: ProbMap, gt: LabelMap, c: int
) -> np.ndarray:
    """Features of pixels where the prediction argmax and the label agree on c."""
    require_same_grid(feat, pred, gt)
    if not (0 <= c < pred.classes):
        raise ValidationError(f"class {c} outside [0, {pred.classes})")
    argmax = pred.flat().argmax(axis=1)
    labels = gt.flat()
    mask = (argmax == c) & (labels == c)
    return feat.pixels()[mask]


def build_maps(
    batches: list[tuple[FeatureMap, ProbMap, LabelMap]],
    k: int,
    seed: int,
    config: EmConfig = EmConfig(),
    min_samples: int = MIN_CLASS_SAMPLES,
    cap: int = SUBSAMPLE_CAP,
) -> MapsModel:
    """Fit one class-conditional mixture per class with enough trusted pixels.

    Classes that collect fewer than max(k, min_samples) features are left
    absent from the model; they can never win an assignment.
    """
    if not batches:
        raise EmptyModelError("no source batches to build a model from")
    classes = batches[0][1].classes
    dim = batches[0][0].dim
    for feat, pred, gt in batches:
        if pred.classes != classes:
            raise ShapeError("batches disagree on the number of classes")
        if feat.dim != dim:
            raise ShapeError("batches disagree on feature dimensionality")

    floor = max(k, min_samples)
    children = np.random.SeedSequence(seed).spawn(classes)
    gmms: dict[int, ClassGmm] = {}
    for c in range(classes):
        parts = [collect_class_features(feat, pred, gt, c) for feat, pred, gt in batches]
        feats = np.concatenate(parts, axis=0)
        if feats.shape[0] < floor:
            continue
        sub_seed, fit_seed = children[c].generate_state(2)
        feats = subsample(feats, cap=cap, seed=int(sub_seed))
        gmms[c] = fit_gmm(feats, k, seed=int(fit_seed), config=config, class_id=c)
    if not gmms:
        raise EmptyModelError("no class collected enough trusted features")
    return MapsModel(classes=classes, dim=dim, gmms=gmms)


def build_centroids(batches: list[tuple[FeatureMap, ProbMap, LabelMap]]) -> CentroidModel:
    """Single mean vector per class from the same trusted-pixel collection."""
    if not batches:
        raise EmptyModelError("no source batches to build centroids from")
    classes = batches[0][1].classes
    centroids: dict[int, np.ndarray] = {}
    for c in range(classes):
        parts = [collect_class_features(feat, pred, gt, c) for feat, pred, gt in batches]
        feats = np.concatenate(parts, axis=0)
        if feats.shape[0] == 0:
            continue
        centroids[c] = feats.mean(axis=0)
    if not centroids:
        raise EmptyModelError("no class collected any trusted features")
    return CentroidModel(classes=classes, centroids=centroids)


def class_log_densities(model: MapsModel, feat: FeatureMap) -> tuple[np.ndarray, list[int]]:
    """(P, H*W) log mixture densities for the P present classes, sorted by id."""
    if not model.gmms:
        raise EmptyModelError("model has no fitted classes")
    if feat.dim != model.dim:
        raise ShapeError(f"features have dim {feat.dim}, model has {model.dim}")
    present = model.present_classes()
    pixels = feat.pixels()
    scores = np.empty((len(present), pixels.shape[0]), dtype=np.float64)
    for row, c in enumerate(present):
        scores[row] = log_mixture_density(model.gmms[c], pixels)
    return scores, present


def assign_maps_pla(model: MapsModel, feat: FeatureMap, delta: float) -> PseudoLabelMap:
    """Label each pixel with the densest class iff that log density clears delta.

    Ties go to the lowest class id; everything else is ignored.
    """
    scores, present = class_log_densities(model, feat)
    best_row = scores.argmax(axis=0)
    best_score = scores[best_row, np.arange(scores.shape[1])]
    labels = np.asarray(present, dtype=np.int32)[best_row]
    labels[best_score < delta] = IGNORE_LABEL
    return PseudoLabelMap(
        labels=labels.reshape(feat.height, feat.width),
        threshold=float(delta),
        classes=model.classes,
    )


def assign_cas_pla(model: CentroidModel, feat: FeatureMap, dist_threshold: float) -> PseudoLabelMap:
    """Nearest-centroid labeling, kept only within the spatial distance bound."""
    if feat.dim != model.dim:
        raise ShapeError(f"features have dim {feat.dim}, centroids have {model.dim}")
    present = model.present_classes()
    pixels = feat.pixels()
    dists = np.empty((len(present), pixels.shape[0]), dtype=np.float64)
    for row, c in enumerate(present):
        dists[row] = np.sqrt(((pixels - model.centroids[c]) ** 2).sum(axis=1))
    best_row = dists.argmin(axis=0)
    best_dist = dists[best_row, np.arange(dists.shape[1])]
    labels = np.asarray(present, dtype=np.int32)[best_row]
    labels[best_dist > dist_threshold] = IGNORE_LABEL
    return PseudoLabelMap(
        labels=labels.reshape(feat.height, feat.width),
        threshold=float(dist_threshold),
        classes=model.classes,
    )


def assign_conf_pla(pred: ProbMap, conf_threshold: float) -> PseudoLabelMap:
    """Argmax labeling kept only where the winning probability clears the bar."""
    if not (0.0 < conf_threshold <= 1.0):
        raise ValidationError(f"confidence threshold must be in (0, 1], got {conf_threshold}")
    probs = pred.flat()
    labels = probs.argmax(axis=1).astype(np.int32)
    best = probs[np.arange(probs.shape[0]), labels]
    labels[best < conf_threshold] = IGNORE_LABEL
    return PseudoLabelMap(
        labels=labels.reshape(pred.height, pred.width),
        threshold=float(conf_threshold),
        classes=pred.classes,
    )


def pl_ratio(pl: PseudoLabelMap) -> float:
    """Fraction of pixels that received a pseudo label."""
    return float((pl.labels != IGNORE_LABEL).mean())
