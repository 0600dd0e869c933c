"""Data-driven robust MPC closed-loop simulation for an artificial pancreas."""

__version__ = "0.1.0"
