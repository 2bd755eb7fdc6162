"""Speed-selective moving-object detection for event cameras."""

__version__ = "0.1.0"
