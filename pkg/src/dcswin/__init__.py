"""DC-Swin: Swin-style encoder plus densely connected feature aggregation decoder."""

__version__ = "0.1.0"
