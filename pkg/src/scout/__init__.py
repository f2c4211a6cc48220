"""SCOUT: score-based discovery of nonlinear cyclic causal graphs and
unknown soft-intervention targets from multi-experiment data."""

__version__ = "0.1.0"
