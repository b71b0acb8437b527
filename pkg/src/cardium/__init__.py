"""Multimodal (ultrasound image + maternal record) CHD detection at desk scale."""

__version__ = "0.1.0"
