"""Deterministic synthetic world: agents, LiDAR, camera features, detections, dataset files."""
