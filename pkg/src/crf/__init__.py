"""CRF potentials, inference and training."""
