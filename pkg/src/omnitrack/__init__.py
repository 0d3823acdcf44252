"""Unified single-object tracking across reference and video modalities."""
from .encoder import Encoder, EncoderConfig, ReferenceModality, VideoModality
from .model import ModelConfig, Tracker

__all__ = ["Encoder", "EncoderConfig", "ModelConfig", "ReferenceModality", "Tracker", "VideoModality"]
__version__ = "0.1.0"
