"""Horizontal and vertical attention augmentations for a toy seq2seq Transformer."""

__version__ = "0.1.0"
