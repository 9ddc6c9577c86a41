"""Projection and frame-to-frame geometry."""
