"""Real-time detection of sharply increasing trends in surveillance time series."""

__version__ = "0.1.0"
