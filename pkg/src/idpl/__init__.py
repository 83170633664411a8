"""Intra-subdomain adversarial self-training with dynamic pseudo labels.

A desk-scale toolkit: synthetic source/target scenes, a small segmentation
network, per-class dynamic pseudo-label thresholds, instance-confidence
subdomain splitting and class-level self-attention adversarial training.
"""

from idpl.datamodel import (
    IGNORE,
    LabeledImage,
    UnlabeledImage,
    ProbMap,
    PseudoLabelMap,
    softmax_over_channels,
    one_hot,
)

__version__ = "0.1.0"

__all__ = [
    "IGNORE",
    "LabeledImage",
    "UnlabeledImage",
    "ProbMap",
    "PseudoLabelMap",
    "softmax_over_channels",
    "one_hot",
]
