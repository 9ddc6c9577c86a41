"""
Typed pipeline settings assembled from the layered YAML configuration.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

from src.core.config import Config
from src.core.exceptions import ConfigurationError
from src.core.models import LabelSet, MAPPING_PRESETS, label_preset
from src.crf.inference import BPConfig
from src.crf.potentials import KernelParams
from src.crf.training import TrainConfig
from src.lidar.features import NeighborhoodParams, RansacParams
from src.segmentation.supervoxels import SupervoxelConfig


SPLITS = ("leave-one-domain-out", "domain-training", "adaptation-training")
DECODERS = ("max-product", "marginal-argmax")


@dataclass(frozen=True)
class EdgeFamilies:
    """Which edge families a graph is built with."""
    spatial_2d: bool = True
    spatial_3d: bool = True
    cross_modal: bool = True
    temporal: bool = True

    @property
    def any(self) -> bool:
        return self.spatial_2d or self.spatial_3d or self.cross_modal or self.temporal


VARIANTS: Dict[str, EdgeFamilies] = {
    "initial": EdgeFamilies(False, False, False, False),
    "single-modality": EdgeFamilies(True, True, False, False),
    "fused": EdgeFamilies(True, True, True, False),
    "fused-temporal": EdgeFamilies(True, True, True, True),
}


def variant_edges(name: str) -> EdgeFamilies:
    if name not in VARIANTS:
        raise ConfigurationError(f"Unknown variant '{name}' (known: {list(VARIANTS)})")
    return VARIANTS[name]


@dataclass(frozen=True)
class FusionParams:
    temporal_gate_m: float = 1.0
    frame_gap_s: float = 2.0


@dataclass(frozen=True)
class ClassifierParams:
    regularization: float = 1.0
    max_iter: int = 1000


@dataclass(frozen=True)
class PipelineSettings:
    """Everything a pipeline run needs, resolved and validated."""
    labels: LabelSet = field(default_factory=lambda: label_preset("four_class"))
    evaluation_mapping: Optional[str] = None
    kernel: KernelParams = field(default_factory=KernelParams)
    bp: BPConfig = field(default_factory=BPConfig)
    decoder: str = "max-product"
    train: TrainConfig = field(default_factory=TrainConfig)
    neighborhood: NeighborhoodParams = field(default_factory=NeighborhoodParams)
    ransac: RansacParams = field(default_factory=RansacParams)
    classifier: ClassifierParams = field(default_factory=ClassifierParams)
    supervoxels: SupervoxelConfig = field(default_factory=SupervoxelConfig)
    fusion: FusionParams = field(default_factory=FusionParams)
    edges: EdgeFamilies = field(default_factory=EdgeFamilies)
    seed: int = 0
    threads: int = 1
    split: str = "leave-one-domain-out"
    variants: Tuple[str, ...] = tuple(VARIANTS)

    def __post_init__(self):
        """Validate choices that the typed parts do not check themselves."""
        if self.decoder not in DECODERS:
            raise ConfigurationError(f"Unknown decoder '{self.decoder}' (expected one of {DECODERS})")
        if self.split not in SPLITS:
            raise ConfigurationError(f"Unknown split '{self.split}' (expected one of {SPLITS})")
        if self.evaluation_mapping is not None and self.evaluation_mapping not in MAPPING_PRESETS:
            raise ConfigurationError(f"Unknown evaluation mapping '{self.evaluation_mapping}'")
        if self.threads < 1:
            raise ConfigurationError("threads must be positive")
        for name in self.variants:
            variant_edges(name)

    def with_edges(self, edges: EdgeFamilies) -> "PipelineSettings":
        return replace(self, edges=edges)


def settings_from_config(config: Config, seed: Optional[int] = None,
                         threads: Optional[int] = None) -> PipelineSettings:
    """
    Build typed settings from a validated configuration.

    Args:
        config: Loaded configuration
        seed: Optional override of ``pipeline.seed``
        threads: Optional override of ``pipeline.threads``

    Raises:
        ConfigurationError: invalid values
    """
    config.validate()
    pipeline = config.pipeline_config
    seed = int(pipeline.get('seed', 0) if seed is None else seed)
    threads = int(pipeline.get('threads', 1) if threads is None else threads)

    potentials = config.potentials_config
    inference = config.inference_config
    training = config.training_config
    lidar = config.lidar_config
    ransac = lidar.get('ransac', {})
    classifier = lidar.get('classifier', {})
    segments = config.supervoxel_config
    fusion = config.fusion_config
    edges = fusion.get('edges', {})

    return PipelineSettings(
        labels=label_preset(config.get('labels.preset', 'four_class')),
        evaluation_mapping=config.get('labels.evaluation_mapping'),
        kernel=KernelParams(
            sigma_2d=float(potentials['sigma_2d']),
            sigma_3d=float(potentials['sigma_3d']),
            sigma_nav=float(potentials['sigma_nav']),
            sigma_time=float(potentials['sigma_time']),
            prob_floor=float(potentials['prob_floor']),
        ),
        bp=BPConfig(
            max_iterations=int(inference['max_iterations']),
            tolerance=float(inference['tolerance']),
            damping=float(inference['damping']),
            schedule=inference['schedule'],
        ),
        decoder=inference.get('decoder', 'max-product'),
        train=TrainConfig(
            l2_lambda=float(training['l2_lambda']),
            max_outer_iterations=int(training['max_outer_iterations']),
            gradient_tolerance=float(training['gradient_tolerance']),
            step_rule=training['step_rule'],
            tie_symmetric=bool(training.get('tie_symmetric', True)),
            step_size=float(training.get('step_size', 0.05)),
            exact_inference=bool(training.get('exact_inference', False)),
            threads=threads,
        ),
        neighborhood=NeighborhoodParams.from_degrees(int(lidar['m_points']), float(lidar['theta_h_deg'])),
        ransac=RansacParams(
            inlier_threshold_m=float(ransac.get('inlier_threshold_m', 0.10)),
            max_iterations=int(ransac.get('max_iterations', 500)),
            seed=seed,
        ),
        classifier=ClassifierParams(
            regularization=float(classifier.get('regularization', 1.0)),
            max_iter=int(classifier.get('max_iter', 1000)),
        ),
        supervoxels=SupervoxelConfig(
            voxel_resolution=float(segments['voxel_resolution']),
            seed_resolution=float(segments['seed_resolution']),
            lambda_spatial=float(segments['lambda_spatial']),
            iterations=int(segments['iterations']),
        ),
        fusion=FusionParams(
            temporal_gate_m=float(fusion['temporal_gate_m']),
            frame_gap_s=float(fusion.get('frame_gap_s', 2.0)),
        ),
        edges=EdgeFamilies(
            spatial_2d=bool(edges.get('spatial_2d', True)),
            spatial_3d=bool(edges.get('spatial_3d', True)),
            cross_modal=bool(edges.get('cross_modal', True)),
            temporal=bool(edges.get('temporal', True)),
        ),
        seed=seed,
        threads=threads,
        split=pipeline.get('split', 'leave-one-domain-out'),
        variants=tuple(pipeline.get('variants', list(VARIANTS))),
    )
