"""Two-stage graph Colonel Blotto: environment, neural agents, training and baselines."""

__version__ = "0.1.0"
