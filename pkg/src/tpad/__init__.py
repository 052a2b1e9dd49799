"""Transitional pattern alignment and distillation for multimodal item embeddings."""

__version__ = "0.1.0"
