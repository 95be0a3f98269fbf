"""Set-prediction temporal grounding: learnable proposals matched to query spans."""

__version__ = "0.1.0"
