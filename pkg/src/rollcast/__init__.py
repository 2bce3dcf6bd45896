"""rollcast: multi-interval weather-change forecasting with adaptive rollout scheduling."""

__version__ = "0.1.0"
