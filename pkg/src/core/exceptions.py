"""
Custom exceptions for the ObstacleFusion engine.

Every exception carries a ``category`` string which the command line
reports on stderr so callers can dispatch on it without parsing messages.
"""


class FusionError(Exception):
    """Base exception for all ObstacleFusion errors."""
    category = "fusion"


class ConfigurationError(FusionError):
    """Raised when there's an error in configuration loading or validation."""
    category = "configuration"


class GraphValidationError(FusionError):
    """Raised when a fusion graph cannot be built from the given parts."""
    category = "graph"


class DanglingEndpointError(GraphValidationError):
    """Raised when an edge references a node that is not in the graph."""
    pass


class DuplicateNodeError(GraphValidationError):
    """Raised when the same NodeRef is supplied twice."""
    pass


class DuplicateEdgeError(GraphValidationError):
    """Raised when an unordered (kind, a, b) edge is supplied twice."""
    pass


class EdgeKindMismatchError(GraphValidationError):
    """Raised when an edge kind does not match the modalities/frames it links."""
    pass


class KernelRangeError(GraphValidationError):
    """Raised when an edge kernel lies outside [0, 1]."""
    pass


class LabelError(FusionError):
    """Raised for invalid label sets, non-total mappings or inadmissible labels."""
    category = "labels"


class PotentialError(FusionError):
    """Raised when a potential is evaluated outside its domain."""
    category = "potentials"


class InferenceError(FusionError):
    """Raised when inference cannot be run on the given graph."""
    category = "inference"


class StateSpaceError(InferenceError):
    """Raised when exact enumeration would exceed its state-space bound."""
    pass


class TrainingError(FusionError):
    """Raised when weight estimation fails."""
    category = "training"


class FeatureError(FusionError):
    """Raised when lidar features or point classification fail."""
    category = "features"


class DegenerateCloudError(FeatureError):
    """Raised when no ground plane with at least three inliers can be found."""
    pass


class SegmentationError(FusionError):
    """Raised when superpixel or supervoxel processing fails."""
    category = "segmentation"


class DataFormatError(FusionError):
    """Raised when frame files or checkpoints are missing or inconsistent."""
    category = "data"


class EvaluationError(FusionError):
    """Raised by the metrics and cross-validation harness."""
    category = "evaluation"


class FrameProcessingError(FusionError):
    """Wraps any error raised while processing one frame."""
    category = "frame"

    def __init__(self, frame_id: str, cause: Exception):
        self.frame_id = frame_id
        self.cause = cause
        cause_category = getattr(cause, "category", type(cause).__name__)
        super().__init__(f"frame {frame_id}: [{cause_category}] {cause}")
