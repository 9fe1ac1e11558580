"""Multispectral change detection with from-scratch patch classifiers.

Trains Early Fusion and Siamese 15x15 patch CNNs on co-registered image
pairs, produces full-image change maps by Gaussian-weighted patch voting,
and benchmarks against classical difference-image baselines under a
per-class accuracy metric.
"""

__version__ = "0.1.0"

from .dataset import (BandRaster, ChannelMode, DatasetError, ImagePair, MultispectralImage,
                      NormalizationStats, apply_normalization, compute_normalization,
                      generate_synthetic, import_region, resample_to_10m, select_channels)
from .inference import gaussian_kernel, predict_dense, threshold_map, vote_map
from .metrics import Confusion, EvalReport, confusion, report
from .models import (Network, TrainConfig, TrainLog, build_ef, build_siam, forward_pair,
                     load_model, save_model, train)
from .patches import (ClassWeights, PatchPair, PatchSampler, class_weights,
                      dihedral_transform, extract_patch_pair, training_stream, valid_centers)

__all__ = [
    "BandRaster", "ChannelMode", "ClassWeights", "Confusion", "DatasetError",
    "EvalReport", "ImagePair", "MultispectralImage", "Network", "NormalizationStats",
    "PatchPair", "PatchSampler", "TrainConfig", "TrainLog",
    "apply_normalization", "build_ef", "build_siam", "class_weights",
    "compute_normalization", "confusion", "dihedral_transform", "extract_patch_pair",
    "forward_pair", "gaussian_kernel", "generate_synthetic", "import_region",
    "load_model", "predict_dense", "report", "resample_to_10m", "save_model",
    "select_channels", "threshold_map", "train", "training_stream", "valid_centers",
    "vote_map",
]
