"""Multimodal MR slice translation with a transformer modality infuser, built on a small numpy autodiff engine."""

__version__ = "0.1.0"
