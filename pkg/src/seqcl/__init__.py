"""Continual learning with recurrent and feedforward sequence classifiers."""

__version__ = "0.1.0"
