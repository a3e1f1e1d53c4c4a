"""PMU-based state estimation with graph neural networks, LSE and MLP baselines."""

__version__ = "0.1.0"
