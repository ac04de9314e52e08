"""Delay-optimal rate allocation for intra- and inter-session network coding."""

__version__ = "0.1.0"
