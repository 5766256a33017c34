"""Federated self-supervised one-shot segmentation."""

__version__ = "0.1.0"
