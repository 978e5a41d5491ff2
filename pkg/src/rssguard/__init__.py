"""Federated indoor-localization simulator with poisoning attacks and a
reconstruction-error / saliency-weighted defense."""

__version__ = "0.1.0"
