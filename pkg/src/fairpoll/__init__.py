"""Group disparity measurement and fair facility planning."""

from .geo import GeoPoint, InvalidInputError, Metric

__all__ = ["GeoPoint", "InvalidInputError", "Metric"]
__version__ = "0.1.0"
