"""Acquisition-perturbation QA harness for CT lung-nodule detectors."""

__version__ = "0.1.0"
