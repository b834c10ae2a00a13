"""Volumetric brain-lesion segmentation kit built from first principles.

Squeeze-excite encoders, attention-guided-filter decoders, a weighted
soft-Dice loss with an analytic gradient, the standard segmentation
metric suite, and a deterministic training/inference harness, all on
plain numpy with explicit backward passes, verifiable against finite
differences and brute-force oracles at desk scale.
"""

__version__ = "0.1.0"
