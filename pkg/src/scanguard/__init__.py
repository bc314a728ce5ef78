"""Volume-dependent control limits for abnormal price changes in scanner data."""

__version__ = "0.1.0"
