"""Foreground-weighted pyramid reconstruction matching for occluded re-identification."""

from .features import DEFAULT_PYRAMID, ExtractorParams, PyramidSpec, SpatialFeatureSet, embed_patches, extract, pyramid_pool
from .foreground import ForegroundClassifier, fpg_loss, foreground_probs, mask_labels
from .reconstruction import (
    GalleryFactor,
    MatchResult,
    RidgeParams,
    avg_distance,
    distance_gradients,
    fpr_distance,
    fpr_match,
    residual_errors,
    ridge_coefficients,
)
from .retrieval_eval import EvalReport, cmc_curve, evaluate, mean_ap, rank_gallery
from .tensor_io import DatasetManifest, SynthConfig, generate_synthetic, load_manifest, read_tensor, write_tensor
from .training import TrainConfig, TrainState, batch_hard_triplet, grad_check, pk_sample, total_loss, train_toy

__version__ = "0.1.0"
