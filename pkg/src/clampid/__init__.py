"""Closed-loop identification of conductance-based neuron models."""

__version__ = "0.1.0"
