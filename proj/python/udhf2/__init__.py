"""Frequency-decomposed segmentation and change detection on a small tensor engine."""

from ._core import (
    ChangeDetector,
    ConfigError,
    DimensionError,
    ParameterError,
    Segmenter,
    config_text,
    dwt_decompose,
    dwt_reconstruct,
    generate_change_pair,
    generate_scene,
    gradient_suite,
    metrics,
    stationary_decompose,
    uncertainty_mask,
)

__all__ = [
    "ChangeDetector",
    "ConfigError",
    "DimensionError",
    "ParameterError",
    "Segmenter",
    "config_text",
    "dwt_decompose",
    "dwt_reconstruct",
    "generate_change_pair",
    "generate_scene",
    "gradient_suite",
    "metrics",
    "stationary_decompose",
    "uncertainty_mask",
]
