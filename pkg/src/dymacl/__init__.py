"""Curriculum learning over growing agent counts with a dynamic agent-number network."""

__version__ = "0.1.0"
