"""VP-GO: action-conditioned stochastic visual prediction with a learned prior."""

__version__ = "0.3.0"
