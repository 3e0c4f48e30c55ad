"""Toy-scale one-step latent diffusion image codec."""

from .codec import DiTIC, decode_image, encode_image
from .config import AlignConfig, ModelConfig, TrainConfig

__all__ = ["DiTIC", "encode_image", "decode_image", "ModelConfig", "AlignConfig", "TrainConfig"]
