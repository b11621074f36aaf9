"""LiDAR-camera fusion, tracking and multi-class trajectory prediction at desk scale."""

__version__ = "0.1.0"
