"""End-to-end frame processing, evaluation and synthetic data."""
