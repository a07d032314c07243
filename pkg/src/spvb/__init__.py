"""Variational Bayes for NNGP spatial linear mixed models."""
__version__ = "0.1.0"
