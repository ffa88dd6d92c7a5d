"""DP-Hype: differentially private federated hyperparameter selection."""

__version__ = "1.0.1"
