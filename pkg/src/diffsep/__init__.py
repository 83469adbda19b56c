"""Differentiable unsupervised source separation for vocal ensembles."""

__version__ = "0.1.0"
