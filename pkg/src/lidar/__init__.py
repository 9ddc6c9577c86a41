"""Lidar ground alignment, point features and point classifiers."""
