"""Score-based probabilistic spatiotemporal forecasting with graph-aware SDEs."""

from .estimator import ScoreSdeForecaster

__version__ = "0.1.0"

__all__ = ["ScoreSdeForecaster", "__version__"]
