"""Region-promptable contrastive vision-language model, desk scale."""

from .encoders import EncoderConfig, ImageSample
from .model import RegionTextModel
from .prompts import PromptKind, SpatialPrompt

__all__ = [
    "EncoderConfig",
    "ImageSample",
    "PromptKind",
    "RegionTextModel",
    "SpatialPrompt",
]
