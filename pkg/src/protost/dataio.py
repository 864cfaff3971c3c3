"""Pixel-grid containers and their on-disk formats.

All grid files share one layout: a 4-byte ASCII magic, a u8 format version,
little-endian u32 dimensions, then a flat little-endian payload in row-major,
pixel-major, channel-minor order.  Model files are either a JSON tree or a
"MODL" binary container; both round-trip parameters exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    FormatError,
    LengthError,
    ShapeError,
    ValidationError,
    VersionError,
)

FORMAT_VERSION = 1
MODEL_SCHEMA_VERSION = 1
IGNORE_LABEL = -1

_FMAP_MAGIC = b"FMAP"
_LMAP_MAGIC = b"LMAP"
_PMAP_MAGIC = b"PMAP"
_WMAP_MAGIC = b"WMAP"
_MODEL_MAGIC = b"MODL"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class FeatureMap:
    """H x W grid of d-dimensional feature vectors (float32 storage)."""

    data: np.ndarray  # (H, W, d)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ShapeError(f"feature map must be (H, W, d), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("feature map contains non-finite entries")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def pixels(self) -> np.ndarray:
        """Flattened (H*W, d) float64 view for numeric work."""
        return self.data.reshape(-1, self.dim).astype(np.float64)


@dataclass(frozen=True)
class LabelMap:
    """H x W grid of integer class ids; -1 marks ignored pixels."""

    labels: np.ndarray  # (H, W)

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if labels.ndim != 2:
            raise ShapeError(f"label map must be (H, W), got {labels.shape}")
        if labels.min(initial=0) < IGNORE_LABEL:
            raise ValidationError("labels below the ignore sentinel -1")
        object.__setattr__(self, "labels", _freeze(labels))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def flat(self) -> np.ndarray:
        return self.labels.reshape(-1)


@dataclass(frozen=True)
class ProbMap:
    """H x W grid of per-pixel class probability vectors.

    Held in float64 for downstream gradient work; the PMAP file stores
    float32 per the interchange format.
    """

    probs: np.ndarray  # (H, W, C)

    def __post_init__(self):
        probs = np.ascontiguousarray(self.probs, dtype=np.float64)
        if probs.ndim != 3:
            raise ShapeError(f"prob map must be (H, W, C), got {probs.shape}")
        if not np.all(np.isfinite(probs)):
            raise ValidationError("probabilities contain non-finite entries")
        if probs.min(initial=0.0) < 0.0:
            raise ValidationError("probabilities must be non-negative")
        sums = probs.sum(axis=2)
        if np.max(np.abs(sums - 1.0), initial=0.0) > 1e-6:
            raise ValidationError("per-pixel probabilities must sum to 1 within 1e-6")
        object.__setattr__(self, "probs", _freeze(probs))

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]

    @property
    def classes(self) -> int:
        return self.probs.shape[2]

    def flat(self) -> np.ndarray:
        return self.probs.reshape(-1, self.classes)


def require_same_grid(*maps) -> tuple[int, int]:
    """Check that all maps share one H x W resolution; returns it."""
    shapes = {(m.height, m.width) for m in maps}
    if len(shapes) != 1:
        raise ShapeError(f"resolution mismatch across paired maps: {sorted(shapes)}")
    return shapes.pop()


# ---------------------------------------------------------------------------
# grid files


def _write_grid(path, magic: bytes, dims: tuple[int, ...], payload: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<B", FORMAT_VERSION))
        f.write(struct.pack("<" + "I" * len(dims), *dims))
        f.write(payload.tobytes())


def _read_grid(path, magic: bytes, ndims: int, dtype) -> tuple[tuple[int, ...], np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    head = 4 + 1 + 4 * ndims
    if len(raw) < head:
        raise FormatError(f"{path}: file shorter than its header")
    if raw[:4] != magic:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    version = raw[4]
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported format version {version}")
    dims = struct.unpack_from("<" + "I" * ndims, raw, 5)
    count = int(np.prod(dims))
    expected = head + count * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise LengthError(
            f"{path}: payload holds {len(raw) - head} bytes, header promises {expected - head}"
        )
    payload = np.frombuffer(raw, dtype=dtype, offset=head).reshape(dims)
    return dims, payload


def save_feature_map(fmap: FeatureMap, path) -> None:
    _write_grid(path, _FMAP_MAGIC, (fmap.height, fmap.width, fmap.dim), fmap.data)


def load_feature_map(path) -> FeatureMap:
    _, payload = _read_grid(path, _FMAP_MAGIC, 3, "<f4")
    if not np.all(np.isfinite(payload)):
        raise ValidationError(f"{path}: non-finite feature entries")
    return FeatureMap(payload)


def save_label_map(lmap: LabelMap, path) -> None:
    _write_grid(path, _LMAP_MAGIC, (lmap.height, lmap.width), lmap.labels)


def load_label_map(path) -> LabelMap:
    _, payload = _read_grid(path, _LMAP_MAGIC, 2, "<i4")
    return LabelMap(payload)


def save_prob_map(pmap: ProbMap, path) -> None:
    payload = pmap.probs.astype("<f4")
    _write_grid(path, _PMAP_MAGIC, (pmap.height, pmap.width, pmap.classes), payload)


def load_prob_map(path) -> ProbMap:
    _, payload = _read_grid(path, _PMAP_MAGIC, 3, "<f4")
    probs = payload.astype(np.float64)
    # float32 rounding can leave row sums a hair off 1; renormalize the
    # stored values rather than rejecting our own files.
    sums = probs.sum(axis=2, keepdims=True)
    if np.any(sums <= 0) or not np.all(np.isfinite(probs)):
        raise ValidationError(f"{path}: invalid probability payload")
    return ProbMap(probs / sums)


def save_weight_map(weights: np.ndarray, path) -> None:
    """Write a single-channel float map (WMAP), e.g. transferability weights."""
    w = np.ascontiguousarray(weights, dtype="<f4")
    if w.ndim != 2:
        raise ShapeError(f"weight map must be (H, W), got {w.shape}")
    _write_grid(path, _WMAP_MAGIC, w.shape, w)


def load_weight_map(path) -> np.ndarray:
    _, payload = _read_grid(path, _WMAP_MAGIC, 2, "<f4")
    if not np.all(np.isfinite(payload)):
        raise ValidationError(f"{path}: non-finite weights")
    return payload.astype(np.float64)


# ---------------------------------------------------------------------------
# resolution alignment


def align_feature_map(fmap: FeatureMap, height: int, width: int, method: str = "bilinear") -> FeatureMap:
    """Resample a feature map to (height, width) using half-pixel centers.

    Used when a feature grid is coarser than its paired label grid; the
    interpolator is configurable because either choice is defensible.
    """
    if (fmap.height, fmap.width) == (height, width):
        return fmap
    if method not in ("bilinear", "nearest"):
        raise ValidationError(f"unknown interpolation method {method!r}")
    src = fmap.data.astype(np.float64)
    ys = (np.arange(height) + 0.5) * fmap.height / height - 0.5
    xs = (np.arange(width) + 0.5) * fmap.width / width - 0.5
    if method == "nearest":
        yi = np.clip(np.rint(ys), 0, fmap.height - 1).astype(int)
        xi = np.clip(np.rint(xs), 0, fmap.width - 1).astype(int)
        out = src[yi][:, xi]
        return FeatureMap(out.astype(np.float32))
    ys = np.clip(ys, 0.0, fmap.height - 1)
    xs = np.clip(xs, 0.0, fmap.width - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, fmap.height - 1)
    x1 = np.minimum(x0 + 1, fmap.width - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    out = (
        src[y0][:, x0] * (1 - wy) * (1 - wx)
        + src[y0][:, x1] * (1 - wy) * wx
        + src[y1][:, x0] * wy * (1 - wx)
        + src[y1][:, x1] * wy * wx
    )
    return FeatureMap(out.astype(np.float32))


# ---------------------------------------------------------------------------
# model files

_TEXT_ENCODING = "text"
_BINARY_ENCODING = "binary"


def _model_to_tree(model) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Flatten a model into (kind, meta, named float64 arrays)."""
    from . import clustering, gmm, pla, toyseg

    if isinstance(model, gmm.MapsModel):
        meta = {
            "classes": model.classes,
            "dim": model.dim,
            "class_ids": sorted(model.gmms),
            "components": {str(c): len(model.gmms[c].components) for c in model.gmms},
        }
        arrays = {}
        for c in sorted(model.gmms):
            cg = model.gmms[c]
            arrays[f"class{c}.weights"] = np.array([p.weight for p in cg.components])
            arrays[f"class{c}.means"] = np.stack([p.mean for p in cg.components])
            arrays[f"class{c}.vars"] = np.stack([p.var for p in cg.components])
        return "maps_model", meta, arrays
    if isinstance(model, gmm.ClassGmm):
        meta = {"class_id": model.class_id, "dim": model.dim}
        arrays = {
            "weights": np.array([p.weight for p in model.components]),
            "means": np.stack([p.mean for p in model.components]),
            "vars": np.stack([p.var for p in model.components]),
        }
        return "class_gmm", meta, arrays
    if isinstance(model, clustering.PrototypeSet):
        return "prototype_set", {"count": model.count, "dim": model.dim}, {
            "centers": model.centers
        }
    if isinstance(model, pla.CentroidModel):
        meta = {"classes": model.classes, "class_ids": sorted(model.centroids)}
        arrays = {f"class{c}": model.centroids[c] for c in sorted(model.centroids)}
        return "centroid_model", meta, arrays
    if isinstance(model, toyseg.ToyModel):
        meta = {
            "input_dim": model.input_dim,
            "hidden_dim": model.hidden_dim,
            "classes": model.classes,
            "optim": {
                "lr": model.optim.lr,
                "momentum": model.optim.momentum,
                "weight_decay": model.optim.weight_decay,
                "poly_power": model.optim.poly_power,
                "iterations": model.optim.iterations,
            },
        }
        arrays = {"w1": model.w1, "b1": model.b1, "w2": model.w2, "b2": model.b2}
        return "toy_model", meta, arrays
    raise ValidationError(f"cannot serialize model of type {type(model).__name__}")


def _model_from_tree(kind: str, meta: dict, arrays: dict[str, np.ndarray]):
    from . import clustering, gmm, pla, toyseg

    if kind == "maps_model":
        gmms = {}
        for c in meta["class_ids"]:
            comps = [
                gmm.GaussianComponent(weight=float(w), mean=m, var=v)
                for w, m, v in zip(
                    arrays[f"class{c}.weights"],
                    arrays[f"class{c}.means"],
                    arrays[f"class{c}.vars"],
                )
            ]
            gmms[int(c)] = gmm.ClassGmm(class_id=int(c), components=comps, dim=int(meta["dim"]))
        return gmm.MapsModel(classes=int(meta["classes"]), dim=int(meta["dim"]), gmms=gmms)
    if kind == "class_gmm":
        comps = [
            gmm.GaussianComponent(weight=float(w), mean=m, var=v)
            for w, m, v in zip(arrays["weights"], arrays["means"], arrays["vars"])
        ]
        return gmm.ClassGmm(class_id=int(meta["class_id"]), components=comps, dim=int(meta["dim"]))
    if kind == "prototype_set":
        return clustering.PrototypeSet(centers=arrays["centers"])
    if kind == "centroid_model":
        centroids = {int(c): arrays[f"class{c}"] for c in meta["class_ids"]}
        return pla.CentroidModel(classes=int(meta["classes"]), centroids=centroids)
    if kind == "toy_model":
        opt = meta["optim"]
        optim = toyseg.OptimParams(
            lr=float(opt["lr"]),
            momentum=float(opt["momentum"]),
            weight_decay=float(opt["weight_decay"]),
            poly_power=float(opt["poly_power"]),
            iterations=int(opt["iterations"]),
        )
        return toyseg.ToyModel(
            w1=arrays["w1"], b1=arrays["b1"], w2=arrays["w2"], b2=arrays["b2"], optim=optim
        )
    raise FormatError(f"unknown model kind {kind!r}")


def save_model(model, path, encoding: str = _TEXT_ENCODING) -> None:
    """Serialize a fitted model; text (JSON) and binary modes are both exact."""
    kind, meta, arrays = _model_to_tree(model)
    arrays = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in arrays.items()}
    if encoding == _TEXT_ENCODING:
        tree = {
            "schema_version": MODEL_SCHEMA_VERSION,
            "kind": kind,
            "meta": meta,
            "arrays": {
                k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                for k, v in arrays.items()
            },
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(tree, f, indent=1, sort_keys=True)
            f.write("\n")
    elif encoding == _BINARY_ENCODING:
        header = {
            "schema_version": MODEL_SCHEMA_VERSION,
            "kind": kind,
            "meta": meta,
            "arrays": [{"name": k, "shape": list(arrays[k].shape)} for k in sorted(arrays)],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(_MODEL_MAGIC)
            f.write(struct.pack("<B", FORMAT_VERSION))
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            for k in sorted(arrays):
                f.write(arrays[k].astype("<f8").tobytes())
    else:
        raise ValidationError(f"unknown model encoding {encoding!r}")


def load_model(path):
    """Load a model saved by save_model; the encoding is auto-detected."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) == 0:
        raise FormatError(f"{path}: empty model file")
    if raw[:4] == _MODEL_MAGIC:
        if len(raw) < 9:
            raise FormatError(f"{path}: truncated model header")
        version = raw[4]
        if version != FORMAT_VERSION:
            raise VersionError(f"{path}: unsupported container version {version}")
        (blob_len,) = struct.unpack_from("<I", raw, 5)
        header_end = 9 + blob_len
        if len(raw) < header_end:
            raise LengthError(f"{path}: truncated model header block")
        try:
            header = json.loads(raw[9:header_end].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: bad model header: {e}") from e
        _check_schema_version(header, path)
        arrays = {}
        offset = header_end
        for desc in header["arrays"]:
            count = int(np.prod(desc["shape"])) if desc["shape"] else 1
            nbytes = count * 8
            if len(raw) < offset + nbytes:
                raise LengthError(f"{path}: truncated array {desc['name']!r}")
            arrays[desc["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(
                desc["shape"]
            )
            offset += nbytes
        if offset != len(raw):
            raise LengthError(f"{path}: {len(raw) - offset} trailing bytes after arrays")
        return _model_from_tree(header["kind"], header["meta"], arrays)
    try:
        tree = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: neither a MODL container nor JSON: {e}") from e
    if not isinstance(tree, dict):
        raise FormatError(f"{path}: model JSON must be an object")
    _check_schema_version(tree, path)
    arrays = {
        k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
        for k, v in tree["arrays"].items()
    }
    return _model_from_tree(tree["kind"], tree["meta"], arrays)


def _check_schema_version(tree: dict, path) -> None:
    version = tree.get("schema_version")
    if version is None:
        raise FormatError(f"{path}: missing schema_version")
    if version != MODEL_SCHEMA_VERSION:
        raise VersionError(f"{path}: unsupported schema_version {version}")
