"""Superpixel and supervoxel segmentation."""
