"""ObstacleFusion

Lidar/camera obstacle detection: 2D superpixels and 3D supervoxels are
labeled jointly by a conditional random field with spatial, cross-modal
and temporal edges.
"""

__version__ = "0.1.0"
__description__ = "Multi-modal obstacle detection with a fusion CRF"
