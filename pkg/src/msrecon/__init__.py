"""Multiscale reconstruction of binary pore volumes from learned pattern dictionaries."""

from .dictionaries import (EdgePatternDictionary, MicroPoreDictionary, build_epd, build_mpd,
                           build_multi_epd, extract_skeleton)
from .imageops import (dilate, downsample_mean, euclidean_distance_transform, label_components,
                       otsu_threshold)
from .metrics import MetricsReport, compare, measure, porosity, two_point_correlation
from .pipeline import PipelineConfig, make_simulation_pair, run_pipeline
from .reconstruct import (ReconstructionConfig, pad_micropores, phi_upsample,
                          reconstruct_multistage, reconstruct_stage)
from .scaleplan import ScalePlan, fov, plan
from .volume import BinaryVolume, GrayVolume, LabelField, load_volume, save_volume

__version__ = "0.1.0"

__all__ = [
    "BinaryVolume", "EdgePatternDictionary", "GrayVolume", "LabelField", "MetricsReport",
    "MicroPoreDictionary", "PipelineConfig", "ReconstructionConfig", "ScalePlan", "build_epd",
    "build_mpd", "build_multi_epd", "compare", "dilate", "downsample_mean",
    "euclidean_distance_transform", "extract_skeleton", "fov", "label_components",
    "load_volume", "make_simulation_pair", "measure", "otsu_threshold", "pad_micropores",
    "phi_upsample", "plan", "porosity", "reconstruct_multistage", "reconstruct_stage",
    "run_pipeline", "save_volume", "two_point_correlation",
]
