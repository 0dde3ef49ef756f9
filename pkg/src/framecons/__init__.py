"""Temporally consistent video segmentation: ConvLSTM propagation and an inconsistency loss."""

__version__ = "0.1.0"
