"""Learned three-band image codec for screen content."""

from .autoencoder import DESK, ModelConfig
from .bitstream import Container, decode_image, encode_image
from .checkpoint import load_checkpoint, save_checkpoint
from .model import LAMBDAS, FreqCodec

__all__ = [
    "DESK",
    "LAMBDAS",
    "Container",
    "FreqCodec",
    "ModelConfig",
    "decode_image",
    "encode_image",
    "load_checkpoint",
    "save_checkpoint",
]
__version__ = "0.1.0"
