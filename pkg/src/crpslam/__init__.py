"""CRPS-trained probabilistic limited-area ensemble forecasting at desk scale."""

__version__ = "0.1.0"
