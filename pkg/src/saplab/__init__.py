"""Stochastic Activation Pruning and the attacks against it, at desk scale."""

__version__ = "0.1.0"
