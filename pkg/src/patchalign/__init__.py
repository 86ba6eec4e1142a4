"""Desk-scale vision-language pretraining lab on synthetic shape scenes."""

__version__ = "0.1.0"
