"""Prototype-guided self-training toolkit for pixel feature maps.

Forward direction: fit per-class anisotropic Gaussian mixtures on trusted
source features and assign target pseudo labels by log mixture density.
Backward direction: cluster target features into prototypes and reweight
each source pixel by its transferability.  A small differentiable segmentor
plus synthetic domain-shift worlds make the whole loop verifiable at desk
scale.
"""

from .clustering import PrototypeSet, kmeans, nearest_distance, nearest_distances
from .dataio import (
    IGNORE_LABEL,
    FeatureMap,
    LabelMap,
    ProbMap,
    align_feature_map,
    load_feature_map,
    load_label_map,
    load_model,
    load_prob_map,
    load_weight_map,
    save_feature_map,
    save_label_map,
    save_model,
    save_prob_map,
    save_weight_map,
)
from .gmm import (
    ClassGmm,
    EmConfig,
    GaussianComponent,
    MapsModel,
    component_log_density,
    fit_gmm,
    log_mixture_density,
    subsample,
)
from .losses import (
    LossValue,
    ema_update,
    kld_consistency,
    sce,
    total_loss,
    weighted_ce,
)
from .pla import (
    CentroidModel,
    PseudoLabelMap,
    assign_cas_pla,
    assign_conf_pla,
    assign_maps_pla,
    build_centroids,
    build_maps,
    collect_class_features,
    pl_ratio,
)
from .stm import (
    DistanceMap,
    EntropyStats,
    TransferabilityMap,
    class_entropy,
    distance_map,
    mean_distance,
    transferability_map,
)
from .synthbench import (
    ClassShift,
    ClusterSpec,
    EvalReport,
    HardRegionSpec,
    World,
    WorldSpec,
    evaluate,
    evaluate_dataset,
    generate_world,
    load_world,
    save_world,
)
from .toyseg import (
    OptimParams,
    ToyModel,
    TrainConfig,
    TrainResult,
    augment,
    new_model,
    poly_lr,
    predict,
    train_self,
    train_warmup,
)

__version__ = "0.1.0"
