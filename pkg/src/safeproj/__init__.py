"""Differentiable projection layers for safe reinforcement learning control."""

__version__ = "0.1.0"
