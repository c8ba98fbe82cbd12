"""Inference-time dynamic modality selection for incomplete multimodal classification."""

__version__ = "0.1.0"
