"""Marker-fusion multiple instance learning for multiplexed slide images."""

from .fusion import EmbeddedBag, FusedBag, FusionParams, fuse
from .model import MILModel
from .pooling import GatedAttentionParams, PoolOutput

__version__ = "0.1.0"

__all__ = ["EmbeddedBag", "FusedBag", "FusionParams", "fuse", "MILModel", "GatedAttentionParams", "PoolOutput"]
