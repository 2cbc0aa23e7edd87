"""Cross-modal semantic-graph matching for LiDAR-map / camera relocalization."""

__version__ = "0.1.0"
