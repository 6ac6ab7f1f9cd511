"""Finite-element residual-trained neural network surrogates."""

__version__ = "0.1.0"
