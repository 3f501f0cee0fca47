"""Mixture of modality experts for 3-D lesion segmentation on synthetic phantoms."""

__version__ = "0.1.0"
