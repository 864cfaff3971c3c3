"""Desk-scale per-pixel classifier: one tanh hidden layer + linear softmax head.

The hidden layer is the latent space that prototype fitting and
transferability scoring operate on.  Training is plain momentum SGD with a
polynomially decayed learning rate; gradients are hand-derived.  Both the
source-only warmup and the reweighted self-training phase run through one
deterministic step loop so the degenerate self-training configuration
reproduces warmup exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .dataio import FeatureMap, LabelMap, ProbMap
from .errors import ConfigError, EmptyInputError, ShapeError, ValidationError
from .losses import (
    DEFAULT_EMA,
    DEFAULT_LAMBDA,
    ema_update,
    kld_consistency,
    sce,
    weighted_ce,
)
from .pla import PseudoLabelMap
from .stm import TransferabilityMap


@dataclass(frozen=True)
class OptimParams:
    """SGD hyperparameters baked into a model checkpoint."""

    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    iterations: int = 2000


@dataclass(frozen=True)
class ToyModel:
    """Parameters of the two-layer per-pixel classifier."""

    w1: np.ndarray  # (input_dim, hidden_dim)
    b1: np.ndarray  # (hidden_dim,)
    w2: np.ndarray  # (hidden_dim, classes)
    b2: np.ndarray  # (classes,)
    optim: OptimParams = field(default_factory=OptimParams)

    def __post_init__(self):
        arrays = {}
        for name in ("w1", "b1", "w2", "b2"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"parameter {name} contains non-finite entries")
            arr.flags.writeable = False
            arrays[name] = arr
        if arrays["w1"].ndim != 2 or arrays["w2"].ndim != 2:
            raise ShapeError("weight matrices must be 2-D")
        if arrays["b1"].shape != (arrays["w1"].shape[1],) or arrays["b2"].shape != (
            arrays["w2"].shape[1],
        ):
            raise ShapeError("bias shapes do not match their weight matrices")
        if arrays["w2"].shape[0] != arrays["w1"].shape[1]:
            raise ShapeError("encoder output dim does not match classifier input dim")
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def classes(self) -> int:
        return self.w2.shape[1]

    def param_dict(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def with_params(self, params: dict[str, np.ndarray]) -> "ToyModel":
        return replace(self, **params)


@dataclass(frozen=True)
class TrainConfig:
    """Run-level knobs; optimizer hyperparameters live on the model."""

    iterations: int | None = None  # None: use the model's baked-in budget
    batch_size: int = 4
    seed: int = 0
    lam: float = DEFAULT_LAMBDA
    ema: float = DEFAULT_EMA
    delta: float | None = None  # recorded for traceability only
    noise_scale: float = 0.1
    cutout_frac: float = 0.0

    def __post_init__(self):
        problems = []
        if self.iterations is not None and self.iterations < 0:
            problems.append("iterations must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.lam < 0:
            problems.append("lam must be >= 0")
        if not (0.0 <= self.ema <= 1.0):
            problems.append("ema must be in [0, 1]")
        if self.noise_scale < 0:
            problems.append("noise_scale must be >= 0")
        if not (0.0 <= self.cutout_frac <= 1.0):
            problems.append("cutout_frac must be in [0, 1]")
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class TrainResult:
    """Final student, its EMA teacher, and the per-step loss log."""

    model: ToyModel
    teacher: ToyModel | None
    log: list[dict]


def new_model(
    input_dim: int,
    hidden_dim: int,
    classes: int,
    seed: int,
    optim: OptimParams = OptimParams(),
) -> ToyModel:
    """Randomly initialized model; weights ~ N(0, 1/fan_in), zero biases."""
    if hidden_dim < classes:
        warnings.warn(
            f"hidden_dim {hidden_dim} < classes {classes}; the latent space may be too tight",
            RuntimeWarning,
        )
    rng = np.random.default_rng(seed)
    return ToyModel(
        w1=rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(input_dim, hidden_dim)),
        b1=np.zeros(hidden_dim),
        w2=rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), size=(hidden_dim, classes)),
        b2=np.zeros(classes),
        optim=optim,
    )


def _forward(model: ToyModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hidden activations and softmax probabilities for (N, input_dim) pixels."""
    hidden = np.tanh(x @ model.w1 + model.b1)
    logits = hidden @ model.w2 + model.b2
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return hidden, e / e.sum(axis=1, keepdims=True)


def predict(model: ToyModel, feat: FeatureMap) -> tuple[ProbMap, FeatureMap]:
    """Per-pixel class probabilities plus the hidden-layer feature map."""
    if feat.dim != model.input_dim:
        raise ShapeError(f"features have dim {feat.dim}, model expects {model.input_dim}")
    x = feat.pixels()
    hidden, probs = _forward(model, x)
    prob_map = ProbMap(probs.reshape(feat.height, feat.width, model.classes))
    hidden_map = FeatureMap(hidden.reshape(feat.height, feat.width, model.hidden_dim).astype(np.float32))
    return prob_map, hidden_map


def poly_lr(base: float, step: int, total: int, power: float) -> float:
    """Polynomial decay: base at step 0, exactly 0 at step == total."""
    if total <= 0:
        return base
    return base * (1.0 - step / total) ** power


def augment(
    feat: FeatureMap, seed: int, noise_scale: float, cutout_frac: float = 0.0
) -> FeatureMap:
    """Feature-space jitter: seeded Gaussian noise plus one zeroed block."""
    if noise_scale < 0:
        raise ValidationError(f"noise_scale must be >= 0, got {noise_scale}")
    if not (0.0 <= cutout_frac <= 1.0):
        raise ValidationError(f"cutout_frac must be in [0, 1], got {cutout_frac}")
    rng = np.random.default_rng(seed)
    data = feat.data.astype(np.float64)
    if noise_scale > 0:
        data = data + rng.normal(0.0, noise_scale, size=data.shape)
    if cutout_frac > 0:
        bh = max(1, round(feat.height * np.sqrt(cutout_frac)))
        bw = max(1, round(feat.width * np.sqrt(cutout_frac)))
        bh, bw = min(bh, feat.height), min(bw, feat.width)
        y0 = int(rng.integers(0, feat.height - bh + 1))
        x0 = int(rng.integers(0, feat.width - bw + 1))
        data = data.copy()
        data[y0 : y0 + bh, x0 : x0 + bw, :] = 0.0
    return FeatureMap(data.astype(np.float32))


def _backprop(
    model: ToyModel, x: np.ndarray, hidden: np.ndarray, grad_logits: np.ndarray
) -> dict[str, np.ndarray]:
    """Parameter gradients given dLoss/dlogits for one pixel batch."""
    gw2 = hidden.T @ grad_logits
    gb2 = grad_logits.sum(axis=0)
    dh = (grad_logits @ model.w2.T) * (1.0 - hidden**2)
    gw1 = x.T @ dh
    gb1 = dh.sum(axis=0)
    return {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2}


def _zero_grads(model: ToyModel) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in model.param_dict().items()}


def _sgd_step(
    model: ToyModel,
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
) -> ToyModel:
    opt = model.optim
    params = {}
    for name, p in model.param_dict().items():
        velocity[name] = opt.momentum * velocity[name] + grads[name] + opt.weight_decay * p
        params[name] = p - lr * velocity[name]
    return model.with_params(params)


def _check_source_items(source) -> None:
    if not source:
        raise EmptyInputError("no source maps to train on")
    for item in source:
        if len(item) != 3 or not isinstance(item[2], TransferabilityMap):
            raise ConfigError(
                ["source items must be (FeatureMap, LabelMap, TransferabilityMap) triples"]
            )


def _check_target_items(target) -> None:
    for item in target:
        if len(item) != 2 or not isinstance(item[1], PseudoLabelMap):
            raise ConfigError(["target items must be (FeatureMap, PseudoLabelMap) pairs"])


def _run_training(
    model: ToyModel,
    source: list[tuple[FeatureMap, LabelMap, TransferabilityMap]],
    target: list[tuple[FeatureMap, PseudoLabelMap]],
    cfg: TrainConfig,
    teacher: ToyModel | None,
) -> TrainResult:
    _check_source_items(source)
    _check_target_items(target)
    total = cfg.iterations if cfg.iterations is not None else model.optim.iterations
    rng = np.random.default_rng(cfg.seed)
    velocity = _zero_grads(model)
    if target and teacher is None:
        teacher = model
    log: list[dict] = []

    for step in range(total):
        lr = poly_lr(model.optim.lr, step, total, model.optim.poly_power)
        grads = _zero_grads(model)

        src_idx = rng.integers(0, len(source), size=cfg.batch_size)
        ce_sum = 0.0
        ce_pixels = 0
        src_parts = []
        for i in src_idx:
            feat, gt, w = source[i]
            x = feat.pixels()
            hidden, probs = _forward(model, x)
            pm = ProbMap(probs.reshape(feat.height, feat.width, model.classes))
            term = weighted_ce(pm, gt, w, reduction="sum")
            ce_sum += term.total
            ce_pixels += int((gt.labels >= 0).sum())
            src_parts.append((x, hidden, term.gradient.reshape(-1, model.classes)))
        ce_scale = 1.0 / max(ce_pixels, 1)
        for x, hidden, g in src_parts:
            for name, val in _backprop(model, x, hidden, g * ce_scale).items():
                grads[name] += val
        ce_val = ce_sum * ce_scale

        sce_val = 0.0
        kld_val = 0.0
        if target:
            tgt_idx = rng.integers(0, len(target), size=cfg.batch_size)
            sce_sum = 0.0
            sce_pixels = 0
            kld_sum = 0.0
            kld_pixels = 0
            tgt_parts = []
            for i in tgt_idx:
                feat, pl = target[i]
                aug_seed = int(rng.integers(0, 2**63 - 1))
                aug = augment(feat, aug_seed, cfg.noise_scale, cfg.cutout_frac)
                x = aug.pixels()
                hidden, probs = _forward(model, x)
                pm = ProbMap(probs.reshape(feat.height, feat.width, model.classes))
                _, teacher_probs = _forward(teacher, x)
                tm = ProbMap(teacher_probs.reshape(feat.height, feat.width, model.classes))
                sce_term = sce(pm, pl, reduction="sum")
                kld_term = kld_consistency(pm, tm, reduction="sum")
                sce_sum += sce_term.total
                sce_pixels += int((pl.labels >= 0).sum())
                kld_sum += kld_term.total
                kld_pixels += feat.height * feat.width
                tgt_parts.append(
                    (
                        x,
                        hidden,
                        sce_term.gradient.reshape(-1, model.classes),
                        kld_term.gradient.reshape(-1, model.classes),
                    )
                )
            sce_scale = 1.0 / max(sce_pixels, 1)
            kld_scale = 1.0 / max(kld_pixels, 1)
            for x, hidden, g_sce, g_kld in tgt_parts:
                combined = g_sce * sce_scale + cfg.lam * g_kld * kld_scale
                for name, val in _backprop(model, x, hidden, combined).items():
                    grads[name] += val
            sce_val = sce_sum * sce_scale
            kld_val = kld_sum * kld_scale

        model = _sgd_step(model, grads, velocity, lr)
        if target:
            teacher = teacher.with_params(
                ema_update(teacher.param_dict(), model.param_dict(), cfg.ema)
            )
        log.append(
            {
                "step": step,
                "lr": lr,
                "ce": ce_val,
                "sce": sce_val,
                "consist": kld_val,
                "total": ce_val + sce_val + cfg.lam * kld_val,
            }
        )
    return TrainResult(model=model, teacher=teacher, log=log)


def train_warmup(
    model: ToyModel, source: list[tuple[FeatureMap, LabelMap]], cfg: TrainConfig
) -> TrainResult:
    """Supervised training on labeled source maps (cross-entropy only)."""
    if not source:
        raise EmptyInputError("no source maps to train on")
    ones = [
        (feat, gt, TransferabilityMap.ones(feat.height, feat.width))
        for feat, gt in source
    ]
    return _run_training(model, ones, [], cfg, teacher=None)


def train_self(
    model: ToyModel,
    source: list[tuple[FeatureMap, LabelMap, TransferabilityMap]],
    target: list[tuple[FeatureMap, PseudoLabelMap]],
    cfg: TrainConfig,
    teacher: ToyModel | None = None,
) -> TrainResult:
    """Joint retraining: reweighted source CE + pseudo-label SCE + teacher KL.

    The teacher defaults to a frozen copy of the incoming model and follows
    the student by exponential moving average each step.
    """
    return _run_training(model, source, target, cfg, teacher=teacher)
