"""Budget-aware search and evaluation of congestion-control candidates."""

__version__ = "0.1.0"
