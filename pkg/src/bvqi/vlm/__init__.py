from .cache import FeatureCache, decode_record, encode_record, file_digest
from .encoder import (
    ClipAdapter,
    FrameFeatures,
    TextFeature,
    TokenizationError,
    make_tiny_weights,
    save_weights,
    weights_checksum,
)
from .model import CLIP, ClipConfig, init_weights

__all__ = [
    "CLIP",
    "ClipAdapter",
    "ClipConfig",
    "FeatureCache",
    "FrameFeatures",
    "TextFeature",
    "TokenizationError",
    "decode_record",
    "encode_record",
    "file_digest",
    "init_weights",
    "make_tiny_weights",
    "save_weights",
    "weights_checksum",
]
