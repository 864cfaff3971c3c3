"""Planted domain-shift worlds and segmentation-style evaluation.

A world is a set of source maps (features + labels), target maps whose
labels are held out for scoring, and optional "hard" source clusters that
sit far from every target cluster.  Class regions tile each map in seeded
blocks so maps have spatial structure; target features are the source draw
pushed through a per-class rotation + translation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import (
    FeatureMap,
    LabelMap,
    load_feature_map,
    load_label_map,
    require_same_grid,
    save_feature_map,
    save_label_map,
)
from .errors import FormatError, ShapeError, ValidationError
from .pla import PseudoLabelMap

WORLD_MANIFEST = "manifest.json"
HARD_SIGMA_MARGIN = 8.0


@dataclass(frozen=True)
class ClusterSpec:
    """One axis-aligned Gaussian blob of a class."""

    mean: tuple[float, ...]
    std: tuple[float, ...]
    weight: float = 1.0


@dataclass(frozen=True)
class ClassShift:
    """Rigid motion applied to target features (rotation in the first two axes)."""

    translation: tuple[float, ...] = ()
    rotation_deg: float = 0.0


@dataclass(frozen=True)
class HardRegionSpec:
    """A source-only cluster labeled as an existing class but far from target mass."""

    class_id: int
    mean: tuple[float, ...]
    std: tuple[float, ...]
    fraction: float = 0.3


@dataclass(frozen=True)
class WorldSpec:
    classes: int
    clusters: dict[int, list[ClusterSpec]]
    shift: ClassShift = ClassShift()
    per_class_shift: dict[int, ClassShift] = field(default_factory=dict)
    hard_regions: list[HardRegionSpec] = field(default_factory=list)
    height: int = 32
    width: int = 32
    n_source: int = 8
    n_target: int = 8
    block: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.classes < 1:
            raise ValidationError("a world needs at least one class")
        if set(self.clusters) != set(range(self.classes)):
            raise ValidationError("every class needs a cluster list")
        dims = set()
        for c, specs in self.clusters.items():
            if not specs:
                raise ValidationError(f"class {c} has no clusters")
            for cl in specs:
                dims.add(len(cl.mean))
                if len(cl.std) != len(cl.mean):
                    raise ValidationError("cluster mean/std lengths differ")
                if min(cl.std) <= 0:
                    raise ValidationError("cluster stds must be positive")
                if cl.weight <= 0:
                    raise ValidationError("cluster weights must be positive")
        if len(dims) != 1:
            raise ValidationError("all clusters must share one dimensionality")
        if min(self.height, self.width, self.n_source, self.n_target, self.block) < 1:
            raise ValidationError("map sizes, map counts and block size must be >= 1")
        for hr in self.hard_regions:
            if not (0 <= hr.class_id < self.classes):
                raise ValidationError(f"hard region class {hr.class_id} unknown")
            if not (0.0 < hr.fraction < 1.0):
                raise ValidationError("hard region fraction must be in (0, 1)")
            if len(hr.mean) != next(iter(dims)):
                raise ValidationError("hard region dimensionality mismatch")
            self._check_hard_displacement(hr)

    def _check_hard_displacement(self, hr: HardRegionSpec) -> None:
        mean = np.asarray(hr.mean, dtype=np.float64)
        for c in range(self.classes):
            shift = self.shift_for(c)
            for cl in self.clusters[c]:
                target_mean = _apply_shift(np.asarray(cl.mean, dtype=np.float64), shift)
                gap = float(np.linalg.norm(mean - target_mean))
                if gap < HARD_SIGMA_MARGIN * max(cl.std):
                    raise ValidationError(
                        f"hard region at {hr.mean} is only {gap:.2f} from a target cluster; "
                        f"needs >= {HARD_SIGMA_MARGIN} stds"
                    )

    @property
    def dim(self) -> int:
        return len(next(iter(self.clusters.values()))[0].mean)

    def shift_for(self, class_id: int) -> ClassShift:
        return self.per_class_shift.get(class_id, self.shift)


@dataclass(frozen=True)
class World:
    spec: WorldSpec
    source: list[tuple[FeatureMap, LabelMap]]
    target: list[tuple[FeatureMap, LabelMap]]  # second element is held-out truth
    source_hard_masks: list[np.ndarray]


def _rotation_matrix(dim: int, degrees: float) -> np.ndarray:
    rot = np.eye(dim)
    if degrees != 0.0 and dim >= 2:
        theta = np.deg2rad(degrees)
        rot[0, 0] = rot[1, 1] = np.cos(theta)
        rot[0, 1] = -np.sin(theta)
        rot[1, 0] = np.sin(theta)
    return rot


def _apply_shift(points: np.ndarray, shift: ClassShift) -> np.ndarray:
    dim = points.shape[-1]
    rot = _rotation_matrix(dim, shift.rotation_deg)
    out = points @ rot.T
    if shift.translation:
        out = out + np.asarray(shift.translation, dtype=np.float64)
    return out


def _block_labels(spec: WorldSpec, rng: np.random.Generator) -> np.ndarray:
    by = -(-spec.height // spec.block)
    bx = -(-spec.width // spec.block)
    coarse = rng.integers(0, spec.classes, size=(by, bx))
    full = np.repeat(np.repeat(coarse, spec.block, axis=0), spec.block, axis=1)
    return full[: spec.height, : spec.width].astype(np.int32)


def _sample_class_features(
    spec: WorldSpec,
    class_id: int,
    n: int,
    rng: np.random.Generator,
    domain: str,
    hard_mask_out: np.ndarray | None,
) -> np.ndarray:
    clusters = spec.clusters[class_id]
    weights = np.asarray([c.weight for c in clusters], dtype=np.float64)
    weights /= weights.sum()
    means = np.asarray([c.mean for c in clusters], dtype=np.float64)
    stds = np.asarray([c.std for c in clusters], dtype=np.float64)
    ks = rng.choice(len(clusters), size=n, p=weights)
    z = rng.standard_normal((n, spec.dim))
    feats = means[ks] + stds[ks] * z
    if domain == "target":
        return _apply_shift(feats, spec.shift_for(class_id))
    hard = next((hr for hr in spec.hard_regions if hr.class_id == class_id), None)
    if hard is not None:
        take = rng.random(n) < hard.fraction
        m = int(take.sum())
        if m:
            zh = rng.standard_normal((m, spec.dim))
            feats[take] = np.asarray(hard.mean) + np.asarray(hard.std) * zh
        if hard_mask_out is not None:
            hard_mask_out[:] = take
    return feats


def _generate_map(
    spec: WorldSpec, rng: np.random.Generator, domain: str
) -> tuple[FeatureMap, LabelMap, np.ndarray]:
    labels = _block_labels(spec, rng)
    flat_labels = labels.reshape(-1)
    feats = np.empty((flat_labels.size, spec.dim), dtype=np.float64)
    hard = np.zeros(flat_labels.size, dtype=bool)
    for c in range(spec.classes):
        idx = np.flatnonzero(flat_labels == c)
        if idx.size == 0:
            continue
        mask_out = np.zeros(idx.size, dtype=bool)
        feats[idx] = _sample_class_features(spec, c, idx.size, rng, domain, mask_out)
        hard[idx] = mask_out
    fmap = FeatureMap(feats.reshape(spec.height, spec.width, spec.dim).astype(np.float32))
    return fmap, LabelMap(labels), hard.reshape(spec.height, spec.width)


def generate_world(spec: WorldSpec) -> World:
    """Deterministic world draw; every map gets an independent child stream."""
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_source + spec.n_target)
    source = []
    hard_masks = []
    for i in range(spec.n_source):
        fmap, lmap, hard = _generate_map(spec, np.random.default_rng(children[i]), "source")
        source.append((fmap, lmap))
        hard_masks.append(hard)
    target = []
    for i in range(spec.n_target):
        rng = np.random.default_rng(children[spec.n_source + i])
        fmap, lmap, _ = _generate_map(spec, rng, "target")
        target.append((fmap, lmap))
    return World(spec=spec, source=source, target=target, source_hard_masks=hard_masks)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalReport:
    """Pixel accuracy over assigned pixels, per-class IoU, and confusion counts."""

    accuracy: float
    per_class_iou: np.ndarray  # (C,), NaN for classes absent from the truth
    miou: float
    confusion: np.ndarray  # (C, C) truth x predicted, assigned pixels only
    unassigned: np.ndarray  # (C,) truth pixels the prediction left ignored
    pl_ratio: float | None = None


def confusion_counts(
    pred_labels: np.ndarray, truth: LabelMap, classes: int
) -> tuple[np.ndarray, np.ndarray]:
    t = truth.flat()
    p = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
    if p.shape != t.shape:
        raise ShapeError("prediction and truth resolutions differ")
    if t.max(initial=-1) >= classes or p.max(initial=-1) >= classes:
        raise ValidationError("labels outside the declared class range")
    valid = t >= 0
    assigned = valid & (p >= 0)
    confusion = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(confusion, (t[assigned], p[assigned]), 1)
    unassigned = np.bincount(t[valid & (p < 0)], minlength=classes).astype(np.int64)
    return confusion, unassigned


def report_from_counts(
    confusion: np.ndarray, unassigned: np.ndarray, pl_ratio: float | None = None
) -> EvalReport:
    classes = confusion.shape[0]
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp + unassigned
    truth_pixels = confusion.sum(axis=1) + unassigned
    present = truth_pixels > 0
    iou = np.full(classes, np.nan)
    denom = tp + fp + fn
    with np.errstate(invalid="ignore"):
        iou[present] = np.where(denom[present] > 0, tp[present] / denom[present], 0.0)
    assigned_total = confusion.sum()
    accuracy = float(tp.sum() / assigned_total) if assigned_total > 0 else 0.0
    miou = float(np.nanmean(iou)) if present.any() else 0.0
    return EvalReport(
        accuracy=accuracy,
        per_class_iou=iou,
        miou=miou,
        confusion=confusion,
        unassigned=unassigned,
        pl_ratio=pl_ratio,
    )


def evaluate(pred, truth: LabelMap, classes: int | None = None) -> EvalReport:
    """Score a predicted label map against the planted truth.

    Ignored predictions count as false negatives for IoU but do not enter
    the assigned-pixel accuracy.
    """
    if isinstance(pred, PseudoLabelMap):
        labels = pred.labels
        classes = pred.classes if classes is None else classes
        ratio = float((pred.labels >= 0).mean())
    elif isinstance(pred, LabelMap):
        labels = pred.labels
        ratio = None
        if classes is None:
            classes = int(max(labels.max(initial=0), truth.labels.max(initial=0))) + 1
    else:
        raise ValidationError(f"cannot evaluate predictions of type {type(pred).__name__}")
    require_same_grid(pred, truth)
    confusion, unassigned = confusion_counts(labels, truth, classes)
    return report_from_counts(confusion, unassigned, pl_ratio=ratio)


def evaluate_dataset(preds, truths: list[LabelMap], classes: int) -> EvalReport:
    """Dataset-level report: confusion counts pooled over all map pairs."""
    if len(preds) != len(truths) or not preds:
        raise ValidationError("need matching, non-empty prediction and truth lists")
    confusion = np.zeros((classes, classes), dtype=np.int64)
    unassigned = np.zeros(classes, dtype=np.int64)
    assigned = 0
    total = 0
    for pred, truth in zip(preds, truths):
        labels = pred.labels
        require_same_grid(pred, truth)
        c, u = confusion_counts(labels, truth, classes)
        confusion += c
        unassigned += u
        assigned += int((labels >= 0).sum())
        total += labels.size
    return report_from_counts(confusion, unassigned, pl_ratio=assigned / total)


# ---------------------------------------------------------------------------
# world (de)serialization


def _spec_to_tree(spec: WorldSpec) -> dict:
    return {
        "classes": spec.classes,
        "clusters": {
            str(c): [
                {"mean": list(cl.mean), "std": list(cl.std), "weight": cl.weight}
                for cl in specs
            ]
            for c, specs in spec.clusters.items()
        },
        "shift": {"translation": list(spec.shift.translation), "rotation_deg": spec.shift.rotation_deg},
        "per_class_shift": {
            str(c): {"translation": list(s.translation), "rotation_deg": s.rotation_deg}
            for c, s in spec.per_class_shift.items()
        },
        "hard_regions": [
            {
                "class_id": hr.class_id,
                "mean": list(hr.mean),
                "std": list(hr.std),
                "fraction": hr.fraction,
            }
            for hr in spec.hard_regions
        ],
        "height": spec.height,
        "width": spec.width,
        "n_source": spec.n_source,
        "n_target": spec.n_target,
        "block": spec.block,
        "seed": spec.seed,
    }


def _spec_from_tree(tree: dict) -> WorldSpec:
    return WorldSpec(
        classes=tree["classes"],
        clusters={
            int(c): [
                ClusterSpec(mean=tuple(cl["mean"]), std=tuple(cl["std"]), weight=cl["weight"])
                for cl in specs
            ]
            for c, specs in tree["clusters"].items()
        },
        shift=ClassShift(
            translation=tuple(tree["shift"]["translation"]),
            rotation_deg=tree["shift"]["rotation_deg"],
        ),
        per_class_shift={
            int(c): ClassShift(translation=tuple(s["translation"]), rotation_deg=s["rotation_deg"])
            for c, s in tree.get("per_class_shift", {}).items()
        },
        hard_regions=[
            HardRegionSpec(
                class_id=hr["class_id"],
                mean=tuple(hr["mean"]),
                std=tuple(hr["std"]),
                fraction=hr["fraction"],
            )
            for hr in tree.get("hard_regions", [])
        ],
        height=tree["height"],
        width=tree["width"],
        n_source=tree["n_source"],
        n_target=tree["n_target"],
        block=tree["block"],
        seed=tree["seed"],
    )


def save_world(world: World, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = {"source": [], "target": []}
    for i, (fmap, lmap) in enumerate(world.source):
        names = {
            "features": f"source_{i:03d}.fmap",
            "labels": f"source_{i:03d}.lmap",
            "hard_mask": f"source_{i:03d}.hard.lmap",
        }
        save_feature_map(fmap, out / names["features"])
        save_label_map(lmap, out / names["labels"])
        save_label_map(
            LabelMap(world.source_hard_masks[i].astype(np.int32)), out / names["hard_mask"]
        )
        entries["source"].append(names)
    for i, (fmap, lmap) in enumerate(world.target):
        names = {
            "features": f"target_{i:03d}.fmap",
            "truth": f"target_{i:03d}.truth.lmap",
        }
        save_feature_map(fmap, out / names["features"])
        save_label_map(lmap, out / names["truth"])
        entries["target"].append(names)
    manifest = {
        "schema_version": 1,
        "spec": _spec_to_tree(world.spec),
        "entries": entries,
    }
    with open(out / WORLD_MANIFEST, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_world(world_dir) -> World:
    root = Path(world_dir)
    manifest_path = root / WORLD_MANIFEST
    if not manifest_path.exists():
        raise FormatError(f"{root}: no {WORLD_MANIFEST} found")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("schema_version") != 1:
        raise FormatError(f"{manifest_path}: unsupported manifest schema")
    spec = _spec_from_tree(manifest["spec"])
    source = []
    hard_masks = []
    for names in manifest["entries"]["source"]:
        fmap = load_feature_map(root / names["features"])
        lmap = load_label_map(root / names["labels"])
        hard = load_label_map(root / names["hard_mask"]).labels.astype(bool)
        source.append((fmap, lmap))
        hard_masks.append(hard)
    target = []
    for names in manifest["entries"]["target"]:
        fmap = load_feature_map(root / names["features"])
        lmap = load_label_map(root / names["truth"])
        target.append((fmap, lmap))
    return World(spec=spec, source=source, target=target, source_hard_masks=hard_masks)


# ---------------------------------------------------------------------------
# bundled world presets


def figure_multicluster_spec(seed: int = 7, **overrides) -> WorldSpec:
    """Two-cluster class straddling a single-cluster class (plus a mild shift)."""
    params = dict(
        classes=2,
        clusters={
            0: [
                ClusterSpec(mean=(-4.0, 0.0), std=(0.7, 0.7), weight=0.5),
                ClusterSpec(mean=(4.0, 0.0), std=(0.7, 0.7), weight=0.5),
            ],
            1: [ClusterSpec(mean=(0.0, 0.0), std=(0.7, 0.7))],
        },
        shift=ClassShift(translation=(0.7, 0.7), rotation_deg=8.0),
        height=32,
        width=32,
        n_source=8,
        n_target=8,
        block=8,
        seed=seed,
    )
    params.update(overrides)
    return WorldSpec(**params)


def anisotropy_spec(seed: int = 11, **overrides) -> WorldSpec:
    """Elongated class next to a tight one: 10:1 variance ratio along the gap."""
    params = dict(
        classes=2,
        clusters={
            0: [ClusterSpec(mean=(0.0, 0.0), std=(np.sqrt(10.0), 1.0))],
            1: [ClusterSpec(mean=(6.0, 0.0), std=(1.0, 1.0))],
        },
        shift=ClassShift(translation=(0.3, 0.3)),
        height=32,
        width=32,
        n_source=8,
        n_target=8,
        block=8,
        seed=seed,
    )
    params.update(overrides)
    return WorldSpec(**params)


def hard_source_spec(seed: int = 13, **overrides) -> WorldSpec:
    """Three classes plus a far-out source-only cluster labeled as class 0."""
    params = dict(
        classes=3,
        clusters={
            0: [ClusterSpec(mean=(0.0, 0.0), std=(0.8, 0.8))],
            1: [ClusterSpec(mean=(5.0, 0.0), std=(0.8, 0.8))],
            2: [ClusterSpec(mean=(5.0, 3.5), std=(0.8, 0.8))],
        },
        shift=ClassShift(translation=(0.4, 0.4)),
        hard_regions=[
            HardRegionSpec(class_id=0, mean=(14.0, -6.0), std=(0.8, 0.8), fraction=0.35)
        ],
        height=32,
        width=32,
        n_source=8,
        n_target=8,
        block=8,
        seed=seed,
    )
    params.update(overrides)
    return WorldSpec(**params)


def shifted_spec(seed: int = 3, **overrides) -> WorldSpec:
    """Default end-to-end world: three classes, one multi-cluster, rigid shift."""
    params = dict(
        classes=3,
        clusters={
            0: [
                ClusterSpec(mean=(-4.0, 0.0), std=(0.8, 0.8), weight=0.5),
                ClusterSpec(mean=(4.0, 0.0), std=(0.8, 0.8), weight=0.5),
            ],
            1: [ClusterSpec(mean=(0.0, 0.0), std=(0.8, 0.8))],
            2: [ClusterSpec(mean=(0.0, 4.0), std=(1.2, 0.6))],
        },
        shift=ClassShift(translation=(1.0, 1.0), rotation_deg=10.0),
        height=32,
        width=32,
        n_source=8,
        n_target=8,
        block=8,
        seed=seed,
    )
    params.update(overrides)
    return WorldSpec(**params)


WORLD_PRESETS = {
    "figure-multicluster": figure_multicluster_spec,
    "anisotropy": anisotropy_spec,
    "hard-source": hard_source_spec,
    "shifted": shifted_spec,
}
