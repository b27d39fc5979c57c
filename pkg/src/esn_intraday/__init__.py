"""Multi-horizon intraday return forecasting with echo state networks."""

__version__ = "0.1.0"
