"""Spectral-spatial fusion transformer for hyperspectral cubes."""
from .augment import AugmentSpec, pipeline
from .data import (
    BandStats,
    DatasetManifest,
    HsiCube,
    fit_band_stats,
    load_cube,
    load_dataset,
    normalize,
    save_cube,
    synth_dataset,
)
from .estimator import SSFTClassifier
from .model import SsftConfig, init_params, model_forward, param_count
from .training import TrainConfig, run

__version__ = "0.1.0"

__all__ = [
    "AugmentSpec", "BandStats", "DatasetManifest", "HsiCube", "SSFTClassifier", "SsftConfig",
    "TrainConfig", "fit_band_stats", "init_params", "load_cube", "load_dataset",
    "model_forward", "normalize", "param_count", "pipeline", "run", "save_cube", "synth_dataset",
]
