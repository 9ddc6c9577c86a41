"""
Cross-domain evaluation: each domain is held out in turn, models are trained
on the domains the split strategy allows, and every edge-family variant is
scored on the held-out frames.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from src.core.exceptions import EvaluationError
from src.core.weights import WeightSet
from src.pipeline.frames import Dataset
from src.pipeline.metrics import MetricsReport, evaluate_frames
from src.pipeline.processor import (
    FrameGeometry,
    frame_geometries,
    prepare_frames,
    process_sequence,
    train_point_classifier,
    train_weights,
)
from src.pipeline.settings import SPLITS, PipelineSettings, variant_edges


logger = logging.getLogger('obstacle_fusion.pipeline')

FoldHook = Callable[[str, Tuple[str, ...]], None]


@dataclass
class CrossValidationReport:
    """Per held-out domain: the training domains used and one report per variant."""
    split: str
    folds: Dict[str, Tuple[str, ...]] = field(default_factory=dict)
    results: Dict[str, Dict[str, MetricsReport]] = field(default_factory=dict)

    def variant_totals(self) -> Dict[str, MetricsReport]:
        """Reports pooled over all held-out domains, per variant."""
        totals: Dict[str, MetricsReport] = {}
        for per_variant in self.results.values():
            for variant, report in per_variant.items():
                totals[variant] = totals[variant].merged(report) if variant in totals else report
        return totals

    def flat_reports(self) -> Dict[str, MetricsReport]:
        return {f"{domain}/{variant}": report
                for domain, per_variant in self.results.items()
                for variant, report in per_variant.items()}

    def to_record(self) -> Dict[str, Any]:
        return {
            "split": self.split,
            "folds": {domain: list(training) for domain, training in self.folds.items()},
            "results": {domain: {variant: report.to_record() for variant, report in per_variant.items()}
                        for domain, per_variant in self.results.items()},
        }


def training_domains(dataset: Dataset, held_out: str, split: str) -> Tuple[str, ...]:
    """
    Domains to train on when ``held_out`` is evaluated.

    ``leave-one-domain-out`` uses every domain outside the held-out domain's
    group, ``domain-training`` only the other members of that group and
    ``adaptation-training`` all other domains.

    Raises:
        EvaluationError: unknown split or no domain left to train on
    """
    if split not in SPLITS:
        raise EvaluationError(f"Unknown split '{split}' (expected one of {SPLITS})")
    group = dataset.group_of(held_out)
    others = [d for d in dataset.domains if d != held_out]
    if split == "leave-one-domain-out":
        chosen = [d for d in others if dataset.group_of(d) != group]
    elif split == "domain-training":
        chosen = [d for d in others if dataset.group_of(d) == group]
    else:
        chosen = others
    if not chosen:
        raise EvaluationError(f"Split '{split}' leaves no training domain for '{held_out}'")
    return tuple(chosen)


def cross_validate(dataset: Dataset, settings: PipelineSettings, variants: Optional[Sequence[str]] = None,
                   split: Optional[str] = None, on_fold: Optional[FoldHook] = None) -> CrossValidationReport:
    """
    Evaluate every variant on every held-out domain.

    Args:
        dataset: Domains with annotated frames
        settings: Pipeline settings
        variants: Variant names (default ``settings.variants``)
        split: Split strategy (default ``settings.split``)
        on_fold: Called with ``(held_out, training_domains)`` before each fold trains

    Raises:
        EvaluationError: fewer than two domains, a domain without annotations,
            or a fold whose training set contains the held-out domain
    """
    split = split or settings.split
    variants = list(variants or settings.variants)
    if len(dataset.domains) < 2:
        raise EvaluationError("Cross-validation needs at least two domains")
    for name, frames in dataset.domains.items():
        if not any(frame.annotated for frame in frames):
            raise EvaluationError(f"Domain '{name}' has no annotations")
    edges_of = {variant: variant_edges(variant) for variant in variants}

    geometries: Dict[str, List[FrameGeometry]] = {
        name: frame_geometries(frames, settings)
        for name, frames in dataset.domains.items()
    }

    report = CrossValidationReport(split=split)
    for held_out, test_frames in dataset.domains.items():
        train = training_domains(dataset, held_out, split)
        if held_out in train:
            raise EvaluationError(f"Held-out domain '{held_out}' leaked into its training set")
        logger.info(f"Fold '{held_out}': training on {list(train)}")
        if on_fold is not None:
            on_fold(held_out, train)

        classifier = train_point_classifier(
            [f for d in train for f in dataset.domains[d]], [g for d in train for g in geometries[d]], settings
        )
        prepared_train = [prepare_frames(dataset.domains[d], classifier, settings, geometries[d]) for d in train]
        prepared_test = prepare_frames(test_frames, classifier, settings, geometries[held_out])

        report.folds[held_out] = train
        report.results[held_out] = {}
        for variant in variants:
            edges = edges_of[variant]
            if edges.any:
                weights = train_weights(prepared_train, dataset.camera, settings, edges)
            else:
                weights = WeightSet.zeros(settings.labels.count, labels=settings.labels.names)
            outputs = process_sequence(test_frames, weights, classifier, dataset.camera, settings,
                                       edges, prepared=prepared_test)
            report.results[held_out][variant] = evaluate_frames(
                ((out.label_image, out.point_labels, frame.annotation_2d, frame.annotation_3d)
                 for out, frame in zip(outputs, test_frames)),
                settings.labels, settings.evaluation_mapping,
            )
            logger.info(f"Fold '{held_out}', variant '{variant}' evaluated")
    return report
