"""Elite-pixel selection for time-series InSAR stacks."""

__version__ = "0.1.0"
