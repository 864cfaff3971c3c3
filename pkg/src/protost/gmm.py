"""Per-class mixtures of diagonal-covariance Gaussians, fitted by EM.

Each class is represented by K weighted anisotropic components; log mixture
density is the similarity score used for pseudo-label assignment.  All
density work happens in log space so components hundreds of nats apart
cannot underflow.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clustering import kmeans
from .errors import (
    InsufficientDataError,
    NumericError,
    ShapeError,
    ValidationError,
)

VAR_FLOOR = 1e-6
SUBSAMPLE_CAP = 300_000
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class EmConfig:
    """Knobs for the EM fit."""

    var_floor: float = VAR_FLOOR
    tol: float = 1e-6
    max_iter: int = 100


@dataclass(frozen=True)
class GaussianComponent:
    """One weighted anisotropic component (diagonal covariance)."""

    weight: float
    mean: np.ndarray  # (d,)
    var: np.ndarray  # (d,)

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        var = np.ascontiguousarray(self.var, dtype=np.float64)
        if mean.ndim != 1 or var.shape != mean.shape:
            raise ShapeError(f"component mean/var must be matching vectors, got {mean.shape}/{var.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var)) and np.isfinite(self.weight)):
            raise ValidationError("component parameters must be finite")
        if self.weight <= 0.0:
            raise ValidationError(f"component weight must be positive, got {self.weight}")
        if var.min() <= 0.0:
            raise ValidationError("component variances must be positive")
        mean.flags.writeable = False
        var.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class ClassGmm:
    """The K-component mixture standing in for one semantic class."""

    class_id: int
    components: list[GaussianComponent]
    dim: int

    def __post_init__(self):
        if len(self.components) < 1:
            raise ValidationError("a class mixture needs at least one component")
        if any(c.dim != self.dim for c in self.components):
            raise ShapeError("all components must share the mixture dimensionality")
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"mixture weights must sum to 1, got {total!r}")
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def k(self) -> int:
        return len(self.components)


@dataclass(frozen=True)
class MapsModel:
    """Per-class mixtures; classes without enough data are simply absent."""

    classes: int
    dim: int
    gmms: dict[int, ClassGmm] = field(default_factory=dict)

    def __post_init__(self):
        for cid, cg in self.gmms.items():
            if not (0 <= cid < self.classes):
                raise ValidationError(f"class id {cid} outside [0, {self.classes})")
            if cg.dim != self.dim:
                raise ShapeError(f"class {cid} has dim {cg.dim}, model has {self.dim}")

    def present_classes(self) -> list[int]:
        return sorted(self.gmms)


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.exp(a - m).sum(axis=axis)) + np.squeeze(m, axis=axis)


def _as_batch(f: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == 1
    batch = f[None, :] if single else f
    if batch.ndim != 2 or batch.shape[1] != dim:
        raise ShapeError(f"query of shape {f.shape} does not match dim {dim}")
    return batch, single


def component_log_density(comp: GaussianComponent, f: np.ndarray):
    """Log density of one diagonal Gaussian at f ((d,) vector or (N, d) batch)."""
    batch, single = _as_batch(f, comp.dim)
    quad = ((batch - comp.mean) ** 2 / comp.var).sum(axis=1)
    out = -0.5 * (quad + np.log(comp.var).sum() + comp.dim * _LOG_2PI)
    return float(out[0]) if single else out


def log_mixture_density(gmm: ClassGmm, f: np.ndarray):
    """Log of the weighted component-density sum, via log-sum-exp."""
    batch, single = _as_batch(f, gmm.dim)
    logs = np.empty((batch.shape[0], gmm.k), dtype=np.float64)
    for kk, comp in enumerate(gmm.components):
        logs[:, kk] = np.log(comp.weight) + component_log_density(comp, batch)
    out = _logsumexp(logs, axis=1)
    return float(out[0]) if single else out


def subsample(features: np.ndarray, cap: int = SUBSAMPLE_CAP, seed: int = 0) -> np.ndarray:
    """Uniform subset without replacement once a class exceeds the cap."""
    if cap < 1:
        raise ValidationError(f"cap must be >= 1, got {cap}")
    features = np.asarray(features)
    if features.shape[0] <= cap:
        return features
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(features.shape[0], size=cap, replace=False))
    return features[idx]


def fit_gmm(
    features: np.ndarray,
    k: int,
    seed: int,
    config: EmConfig = EmConfig(),
    class_id: int = 0,
    return_history: bool = False,
):
    """EM fit of a K-component diagonal mixture.

    Initialized from a seeded K-Means partition; variances are floored after
    every update so point-mass clusters stay well defined.  Raises if the
    per-iteration data log-likelihood ever decreases beyond fp slack.
    """
    x = np.ascontiguousarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"features must be (N, d), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("features contain non-finite entries")
    n, dim = x.shape
    if k < 1 or n < k:
        raise InsufficientDataError(f"need at least {k} samples to fit {k} components, got {n}")

    protos = kmeans(x, k, seed=seed)
    means = protos.centers.copy()
    d2 = np.stack([((x - means[kk]) ** 2).sum(axis=1) for kk in range(k)], axis=1)
    labels = d2.argmin(axis=1)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    weights = np.maximum(counts, 1.0)
    weights /= weights.sum()
    variances = np.empty((k, dim), dtype=np.float64)
    for kk in range(k):
        members = x[labels == kk]
        if members.shape[0] > 0:
            variances[kk] = ((members - means[kk]) ** 2).mean(axis=0)
        else:
            variances[kk] = 0.0
    variances = np.maximum(variances, config.var_floor)

    history = []
    prev_ll = -np.inf
    log_resp = np.empty((n, k), dtype=np.float64)
    for _ in range(config.max_iter):
        for kk in range(k):
            log_resp[:, kk] = np.log(weights[kk]) + (
                -0.5
                * (
                    ((x - means[kk]) ** 2 / variances[kk]).sum(axis=1)
                    + np.log(variances[kk]).sum()
                    + dim * _LOG_2PI
                )
            )
        norm = _logsumexp(log_resp, axis=1)
        ll = float(norm.sum())
        if ll < prev_ll - 1e-9 * abs(prev_ll):
            raise NumericError("EM log-likelihood decreased")
        history.append(ll)
        if np.isfinite(prev_ll) and abs(ll - prev_ll) <= config.tol * abs(prev_ll):
            break
        prev_ll = ll

        resp = np.exp(log_resp - norm[:, None])
        occupancy = resp.sum(axis=0)
        safe = np.maximum(occupancy, 1e-12)
        new_means = resp.T @ x / safe[:, None]
        new_vars = np.empty_like(variances)
        for kk in range(k):
            diff2 = (x - new_means[kk]) ** 2
            new_vars[kk] = resp[:, kk] @ diff2 / safe[kk]
        dead = occupancy < 1e-12
        new_means[dead] = means[dead]
        new_vars[dead] = variances[dead]
        means = new_means
        variances = np.maximum(new_vars, config.var_floor)
        weights = np.maximum(occupancy / n, 1e-12)
        weights /= weights.sum()

    comps = [
        GaussianComponent(weight=float(weights[kk]), mean=means[kk], var=variances[kk])
        for kk in range(k)
    ]
    fitted = ClassGmm(class_id=class_id, components=comps, dim=dim)
    if return_history:
        return fitted, np.asarray(history)
    return fitted
