"""Adversarial evasion and adversarial training workbench for NSL-KDD detectors."""

__version__ = "0.1.0"
