"""Desk-scale lab for quantizing Mixture-of-Experts language models.

Forges tiny MoE transformers, samples expert-balanced calibration data from
the model itself, and quantizes expert weights with affinity-weighted
RTN/GPTQ/AWQ solvers.
"""

from moeqlab.errors import (
    ConfigError,
    FactorizationError,
    FormatError,
    InputError,
    UnsupportedShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FactorizationError",
    "FormatError",
    "InputError",
    "UnsupportedShapeError",
]
