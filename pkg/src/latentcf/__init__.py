"""Latent-space counterfactuals for face forgery detectors."""

__version__ = "0.1.0"
