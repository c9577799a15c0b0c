"""Grounded medical VQA toolkit: synthetic scenes, perturbation tests, a toy grounded model and self-prompted decoding."""

__version__ = "0.1.0"
