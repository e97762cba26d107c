"""Streaming speaker-conditioned feature enhancement with asymmetric loss,
adaptive suppression strength and int8 inference."""

from .frontend import FeatureConfig, FeatureSequence, Variant, Waveform, extract
from .masknet import MaskNetConfig, MaskNetParams, StreamState, forward_sequence, forward_step, init_params
from .speaker import DVector, embed_reference
from .suppression import SuppressionConfig

__version__ = "0.1.0"

__all__ = [
    "DVector",
    "FeatureConfig",
    "FeatureSequence",
    "MaskNetConfig",
    "MaskNetParams",
    "StreamState",
    "SuppressionConfig",
    "Variant",
    "Waveform",
    "embed_reference",
    "extract",
    "forward_sequence",
    "forward_step",
    "init_params",
]
