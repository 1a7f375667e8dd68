"""Joint human-object registration from segmented multi-view point clouds."""

__version__ = "0.1.0"
