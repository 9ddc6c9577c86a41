"""
CLI commands for ObstacleFusion (Click implementation).
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import click
import numpy as np
import pandas as pd
import yaml
try:
    from tqdm import tqdm
except ImportError:
    tqdm = None

from src.core.config import Config
from src.core.exceptions import DataFormatError
from src.core.models import MAPPING_PRESETS
from src.core.weights import WeightSet
from src.lidar.classifier import ConstantClassifier, PointClassifier
from src.lidar.features import FEATURE_NAMES
from src.pipeline.crossval import cross_validate
from src.pipeline.frames import (
    Dataset,
    FrameBundle,
    load_dataset,
    read_label_image,
    read_point_labels,
    save_dataset,
    write_graph,
    write_label_image,
    write_point_labels,
)
from src.pipeline.metrics import MetricsReport, evaluate_frames, format_table, write_metrics
from src.pipeline.processor import (
    build_frame_graph,
    frame_geometries,
    prepare_frame,
    prepare_frames,
    process_sequence,
    train_models,
    train_point_classifier,
)
from src.pipeline.settings import SPLITS, VARIANTS, EdgeFamilies, PipelineSettings, settings_from_config, variant_edges
from src.pipeline.synthetic import SceneSpec, synthetic_dataset
from src.state.checkpoint import CheckpointManager


logger = logging.getLogger('obstacle_fusion.cli')


@dataclass
class CliContext:
    """State shared by all subcommands: the configuration and the global overrides."""
    config: Config
    seed: Optional[int] = None
    threads: Optional[int] = None
    verbose: bool = False
    _settings: Optional[PipelineSettings] = field(default=None, repr=False)

    @property
    def settings(self) -> PipelineSettings:
        if self._settings is None:
            self._settings = settings_from_config(self.config, seed=self.seed, threads=self.threads)
        return self._settings

    def settings_for(self, dataset: Dataset) -> PipelineSettings:
        """Settings with the dataset's label set."""
        return replace(self.settings, labels=dataset.labels)


def _progress(items: Iterable, verbose: bool, desc: str) -> Iterable:
    if verbose and tqdm:
        return tqdm(list(items), desc=desc, unit="domain")
    return items


def _select(dataset: Dataset, domains: Sequence[str]) -> Dict[str, List[FrameBundle]]:
    if not domains:
        return dataset.domains
    unknown = [d for d in domains if d not in dataset.domains]
    if unknown:
        raise DataFormatError(f"Unknown domains {unknown} (dataset has {list(dataset.domains)})")
    return {d: dataset.domains[d] for d in domains}


def _edges(settings: PipelineSettings, variant: Optional[str]) -> EdgeFamilies:
    return variant_edges(variant) if variant else settings.edges


def _classifier(settings: PipelineSettings, model: Optional[str]) -> PointClassifier:
    if model is None:
        return ConstantClassifier(settings.labels)
    _, classifier = CheckpointManager(model).load(settings.labels)
    return classifier


def prediction_paths(root: Path, domain: str, frame_id: str) -> Tuple[Path, Path]:
    """Where ``infer`` writes the label image and the point labels of one frame."""
    return root / domain / f"{frame_id}_labels2d.png", root / domain / f"{frame_id}_labels3d.txt"


_variant_option = click.option('--variant', type=click.Choice(list(VARIANTS)), default=None,
                               help='Edge families to use (default: fusion.edges from the configuration)')
_domain_option = click.option('--domain', 'domains', multiple=True,
                              help='Restrict to these domains (repeatable; default: all)')


@click.command('synth')
@click.argument('output', type=click.Path(file_okay=False))
@click.option('--scenario', type=click.Choice(['noiseless', 'fusion-ambiguity']), default=None)
@click.option('--label-mode', type=click.Choice(['four_class', 'binary']), default=None)
@click.option('--frames', type=click.IntRange(min=1), default=None, help='Frames per domain')
@click.option('--domains', type=click.IntRange(min=1), default=2, show_default=True)
@click.option('--confusion', type=click.FloatRange(0.0, 0.5), default=None)
@click.option('--pose-covariance', type=click.FloatRange(min=0.0), default=None)
@click.option('--cloud-format', type=click.Choice(['txt', 'bin']), default='txt', show_default=True)
@click.pass_obj
def synth(obj: CliContext, output: str, scenario: Optional[str], label_mode: Optional[str],
          frames: Optional[int], domains: int, confusion: Optional[float], pose_covariance: Optional[float],
          cloud_format: str):
    """Generate a synthetic dataset with annotations on both modalities."""
    overrides = {k: v for k, v in {
        'scenario': scenario, 'label_mode': label_mode, 'frames': frames,
        'confusion': confusion, 'pose_covariance': pose_covariance,
    }.items() if v is not None}
    spec = SceneSpec.from_config(obj.config.synthetic_config, **overrides)
    seed = obj.seed if obj.seed is not None else int(obj.config.get('pipeline.seed', 0))
    dataset = synthetic_dataset(spec, seed, domains=domains)
    manifest = save_dataset(output, dataset, cloud_format=cloud_format)
    click.echo(f"Wrote {sum(len(f) for f in dataset.domains.values())} frames "
               f"in {len(dataset.domains)} domains to {manifest}")


@click.command('extract-features')
@click.argument('manifest', type=click.Path(exists=True))
@click.option('--output', '-o', required=True, type=click.Path(file_okay=False))
@_domain_option
@click.pass_obj
def extract_features_command(obj: CliContext, manifest: str, output: str, domains: Tuple[str, ...]):
    """Ground-align every cloud and write the per-point feature table."""
    dataset = load_dataset(manifest)
    settings = obj.settings_for(dataset)
    root = Path(output)
    count = 0
    for name, frames in _progress(_select(dataset, domains).items(), obj.verbose, "Features"):
        (root / name).mkdir(parents=True, exist_ok=True)
        for frame, geometry in zip(frames, frame_geometries(frames, settings)):
            table = pd.DataFrame(geometry.features, columns=list(FEATURE_NAMES))
            table.insert(0, "point_id", np.arange(len(table)))
            table.to_csv(root / name / f"{frame.frame_id}_features.csv", index=False, float_format="%.9g")
            count += 1
    click.echo(f"Wrote features of {count} frames to {root}")


@click.command('segment')
@click.argument('manifest', type=click.Path(exists=True))
@click.option('--output', '-o', required=True, type=click.Path(file_okay=False))
@click.option('--model', type=click.Path(exists=True, file_okay=False), default=None,
              help='Model directory with the point classifier (default: uniform classifier)')
@_domain_option
@click.pass_obj
def segment(obj: CliContext, manifest: str, output: str, model: Optional[str], domains: Tuple[str, ...]):
    """Cluster every cloud into supervoxels and write memberships and summaries."""
    dataset = load_dataset(manifest)
    settings = obj.settings_for(dataset)
    classifier = _classifier(settings, model)
    root = Path(output)
    for name, frames in _progress(_select(dataset, domains).items(), obj.verbose, "Segments"):
        (root / name).mkdir(parents=True, exist_ok=True)
        for prepared in prepare_frames(frames, classifier, settings):
            frame_id = prepared.frame.frame_id
            write_point_labels(root / name / f"{frame_id}_segments.txt", prepared.clustering.point_segments)
            rows = []
            for sv in prepared.clustering.supervoxels:
                row = {"supervoxel_id": sv.id, "points": len(sv.member_points),
                       "x": sv.centroid[0], "y": sv.centroid[1], "z": sv.centroid[2],
                       "normal_angle": sv.mean_normal_angle}
                row.update(zip(settings.labels.names, sv.mean_probs))
                rows.append(row)
            pd.DataFrame(rows).to_csv(root / name / f"{frame_id}_supervoxels.csv", index=False,
                                      float_format="%.9g")
            logger.info(f"Frame {frame_id}: {len(rows)} supervoxels")
    click.echo(f"Wrote segments to {root}")


@click.command('build-graph')
@click.argument('manifest', type=click.Path(exists=True))
@click.option('--domain', required=True)
@click.option('--frame', 'frame_id', required=True)
@click.option('--output', '-o', required=True, type=click.Path(file_okay=False))
@click.option('--model', type=click.Path(exists=True, file_okay=False), default=None)
@_variant_option
@click.pass_obj
def build_graph_command(obj: CliContext, manifest: str, domain: str, frame_id: str, output: str,
                        model: Optional[str], variant: Optional[str]):
    """Export the fusion graph of one frame as nodes.csv and edges.csv."""
    dataset = load_dataset(manifest)
    settings = obj.settings_for(dataset)
    frames = _select(dataset, [domain])[domain]
    ids = [f.frame_id for f in frames]
    if frame_id not in ids:
        raise DataFormatError(f"Domain '{domain}' has no frame '{frame_id}'")
    position = ids.index(frame_id)
    edges = _edges(settings, variant)
    classifier = _classifier(settings, model)

    current = prepare_frame(frames[position], classifier, settings)
    previous = None
    if position > 0 and edges.temporal:
        previous = prepare_frame(frames[position - 1], classifier, settings)
    graph = build_frame_graph(current, previous, dataset.camera, settings, edges)
    nodes_path, edges_path = write_graph(output, graph)
    click.echo(f"{graph!r}\nWrote {nodes_path} and {edges_path}")


@click.command('train')
@click.argument('manifest', type=click.Path(exists=True))
@click.option('--output', '-o', required=True, type=click.Path(file_okay=False), help='Model directory')
@_domain_option
@_variant_option
@click.pass_obj
def train(obj: CliContext, manifest: str, output: str, domains: Tuple[str, ...], variant: Optional[str]):
    """Train the point classifier and the CRF weights on annotated frames."""
    dataset = load_dataset(manifest)
    settings = obj.settings_for(dataset)
    selected = _select(dataset, domains)
    edges = _edges(settings, variant)
    sequences = list(selected.values())

    if edges.any:
        classifier, weights = train_models(sequences, dataset.camera, settings, edges)
    else:
        geometries = [g for frames in sequences for g in frame_geometries(frames, settings)]
        classifier = train_point_classifier([f for frames in sequences for f in frames], geometries, settings)
        weights = WeightSet.zeros(settings.labels.count, labels=settings.labels.names)

    CheckpointManager(output).save(weights, classifier, settings.labels, info={
        "domains": list(selected), "variant": variant, "seed": settings.seed,
    })
    click.echo(f"Saved model to {output} (max |w| = {weights.max_abs(include_bias=False):.4f})")


@click.command('infer')
@click.argument('manifest', type=click.Path(exists=True))
@click.option('--model', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--output', '-o', required=True, type=click.Path(file_okay=False))
@_domain_option
@_variant_option
@click.pass_obj
def infer(obj: CliContext, manifest: str, model: str, output: str, domains: Tuple[str, ...],
          variant: Optional[str]):
    """Label every frame with a trained model: one PNG per frame and one label list per cloud."""
    dataset = load_dataset(manifest)
    settings = obj.settings_for(dataset)
    weights, classifier = CheckpointManager(model).load(settings.labels)
    edges = _edges(settings, variant)
    root = Path(output)

    summary: Dict[str, Dict[str, Dict[str, object]]] = {}
    for name, frames in _progress(_select(dataset, domains).items(), obj.verbose, "Inference"):
        (root / name).mkdir(parents=True, exist_ok=True)
        summary[name] = {}
        outputs = process_sequence(frames, weights, classifier, dataset.camera, settings, edges)
        for frame, out in zip(frames, outputs):
            image_path, points_path = prediction_paths(root, name, frame.frame_id)
            write_label_image(image_path, out.label_image)
            write_point_labels(points_path, out.point_labels)
            summary[name][frame.frame_id] = {
                "converged": bool(out.inference.converged),
                "iterations": int(out.inference.iterations_used),
                "log_partition": round(float(out.inference.log_partition), 6),
            }
            if not out.inference.converged:
                click.echo(f"Warning: inference on {name}/{frame.frame_id} did not converge", err=True)
    with open(root / "inference.yaml", "w") as file:
        yaml.safe_dump(summary, file, sort_keys=True)
    click.echo(f"Wrote predictions of {sum(len(v) for v in summary.values())} frames to {root}")


@click.command('evaluate')
@click.argument('manifest', type=click.Path(exists=True))
@click.option('--predictions', required=True, type=click.Path(exists=True, file_okay=False),
              help='Output directory of infer')
@click.option('--output', '-o', type=click.Path(dir_okay=False), default=None, help='Metrics YAML file')
@click.option('--mapping', type=click.Choice(list(MAPPING_PRESETS)), default=None,
              help='Evaluation label mapping (default: labels.evaluation_mapping)')
@_domain_option
@click.pass_obj
def evaluate_command(obj: CliContext, manifest: str, predictions: str, output: Optional[str],
                     mapping: Optional[str], domains: Tuple[str, ...]):
    """Score predictions per pixel and per point against the annotations."""
    dataset = load_dataset(manifest)
    settings = obj.settings_for(dataset)
    mapping = mapping or settings.evaluation_mapping
    root = Path(predictions)

    reports: Dict[str, MetricsReport] = {}
    for name, frames in _select(dataset, domains).items():
        pairs = []
        for frame in frames:
            if not frame.annotated:
                continue
            image_path, points_path = prediction_paths(root, name, frame.frame_id)
            if not image_path.exists() or not points_path.exists():
                raise DataFormatError(f"Missing predictions for {name}/{frame.frame_id} in {root}")
            pairs.append((read_label_image(image_path), read_point_labels(points_path),
                          frame.annotation_2d, frame.annotation_3d))
        reports[name] = evaluate_frames(pairs, dataset.labels, mapping)

    total = MetricsReport()
    for report in reports.values():
        total = total.merged(report)
    click.echo(format_table({**reports, "total": total}))
    if output:
        write_metrics(output, {"domains": {k: v.to_record() for k, v in reports.items()},
                               "total": total.to_record(), "mapping": mapping})
        click.echo(f"Wrote metrics to {output}")


@click.command('cross-validate')
@click.argument('manifest', type=click.Path(exists=True))
@click.option('--split', type=click.Choice(list(SPLITS)), default=None,
              help='Split strategy (default: pipeline.split)')
@click.option('--variant', 'variants', type=click.Choice(list(VARIANTS)), multiple=True,
              help='Variants to evaluate (repeatable; default: pipeline.variants)')
@click.option('--output', '-o', type=click.Path(dir_okay=False), default=None, help='Metrics YAML file')
@click.pass_obj
def cross_validate_command(obj: CliContext, manifest: str, split: Optional[str], variants: Tuple[str, ...],
                           output: Optional[str]):
    """Hold out each domain in turn and score every variant on it."""
    dataset = load_dataset(manifest)
    settings = obj.settings_for(dataset)

    def on_fold(held_out: str, training: Tuple[str, ...]) -> None:
        if obj.verbose:
            click.echo(f"Fold {held_out}: training on {', '.join(training)}")

    report = cross_validate(dataset, settings, variants=list(variants) or None, split=split, on_fold=on_fold)
    reports = dict(report.flat_reports())
    reports.update({f"total/{k}": v for k, v in report.variant_totals().items()})
    click.echo(format_table(reports))
    if output:
        record = report.to_record()
        record["totals"] = {k: v.to_record() for k, v in report.variant_totals().items()}
        write_metrics(output, record)
        click.echo(f"Wrote metrics to {output}")
