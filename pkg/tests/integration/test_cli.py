"""End-to-end tests of the command line."""

import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from src import __version__
from src.cli.main import main
from src.pipeline.frames import MANIFEST_NAME
from tests.scene_factory import TEST_CONFIG


class TestCliBasics:
    """Test help, version and error reporting."""

    def setup_method(self):
        self.runner = CliRunner()

    def test_help_lists_subcommands(self):
        result = self.runner.invoke(main, ['--help'])
        assert result.exit_code == 0
        for command in ('synth', 'extract-features', 'segment', 'build-graph', 'train', 'infer',
                        'evaluate', 'cross-validate'):
            assert command in result.output

    def test_version(self):
        result = self.runner.invoke(main, ['--version'])
        assert result.exit_code == 0
        assert __version__ in result.output

    def test_fusion_errors_exit_with_category(self, tmp_path):
        manifest = tmp_path / MANIFEST_NAME
        manifest.write_text("format_version: 9\n")
        result = self.runner.invoke(main, ['--config', str(TEST_CONFIG), 'segment', str(manifest),
                                           '-o', str(tmp_path / 'out')])
        assert result.exit_code == 2
        assert "error[data]" in result.output

    def test_invalid_configuration(self, tmp_path):
        config = tmp_path / "bad.yaml"
        config.write_text("inference:\n  damping: 3.0\n")
        result = self.runner.invoke(main, ['--config', str(config), 'synth', str(tmp_path / 'data')])
        assert result.exit_code == 2
        assert "error[configuration]" in result.output

    def test_threads_must_be_positive(self, tmp_path):
        result = self.runner.invoke(main, ['--threads', '0', 'synth', str(tmp_path / 'data')])
        assert result.exit_code != 0


class TestCliWorkflow:
    """Test the synth, train, infer and evaluate chain on one synthetic dataset."""

    @pytest.fixture(scope="class")
    def workspace(self, tmp_path_factory):
        root = tmp_path_factory.mktemp("cli")
        runner = CliRunner()
        base = ['--config', str(TEST_CONFIG), '--seed', '7']
        result = runner.invoke(main, base + ['synth', str(root / 'data'), '--frames', '1', '--domains', '2'])
        assert result.exit_code == 0, result.output
        return root, runner, base

    def test_synth_writes_manifest(self, workspace):
        root, _, _ = workspace
        manifest = yaml.safe_load((root / 'data' / MANIFEST_NAME).read_text())
        assert manifest['labels'] == 'four_class'
        assert [d['name'] for d in manifest['domains']] == ['domain_0', 'domain_1']

    def test_extract_features(self, workspace):
        root, runner, base = workspace
        result = runner.invoke(main, base + ['extract-features', str(root / 'data'), '-o', str(root / 'features'),
                                             '--domain', 'domain_0'])
        assert result.exit_code == 0, result.output
        table = pd.read_csv(root / 'features' / 'domain_0' / '000_features.csv')
        assert table.columns[0] == 'point_id'
        assert not (root / 'features' / 'domain_1').exists()

    def test_segment(self, workspace):
        root, runner, base = workspace
        result = runner.invoke(main, base + ['segment', str(root / 'data'), '-o', str(root / 'segments')])
        assert result.exit_code == 0, result.output
        summary = pd.read_csv(root / 'segments' / 'domain_1' / '000_supervoxels.csv')
        assert {'supervoxel_id', 'points', 'ground', 'object'} <= set(summary.columns)

    def test_build_graph(self, workspace):
        root, runner, base = workspace
        result = runner.invoke(main, base + ['build-graph', str(root / 'data'), '--domain', 'domain_0',
                                             '--frame', '000', '-o', str(root / 'graph'), '--variant', 'fused'])
        assert result.exit_code == 0, result.output
        edges = pd.read_csv(root / 'graph' / 'edges.csv')
        assert set(edges['kind']) <= {'spatial_2d', 'spatial_3d', 'cross_modal'}

    def test_unknown_frame(self, workspace):
        root, runner, base = workspace
        result = runner.invoke(main, base + ['build-graph', str(root / 'data'), '--domain', 'domain_0',
                                             '--frame', '999', '-o', str(root / 'graph')])
        assert result.exit_code == 2
        assert "has no frame '999'" in result.output

    def test_train_infer_evaluate(self, workspace):
        root, runner, base = workspace
        model, predictions, metrics = root / 'model', root / 'predictions', root / 'metrics.yaml'

        result = runner.invoke(main, base + ['train', str(root / 'data'), '-o', str(model),
                                             '--domain', 'domain_0', '--variant', 'fused'])
        assert result.exit_code == 0, result.output
        assert (model / 'weights.yaml').exists() and (model / 'classifier.yaml').exists()
        assert yaml.safe_load((model / 'model.yaml').read_text())['domains'] == ['domain_0']

        result = runner.invoke(main, base + ['infer', str(root / 'data'), '--model', str(model),
                                             '-o', str(predictions), '--variant', 'fused'])
        assert result.exit_code == 0, result.output
        assert (predictions / 'domain_1' / '000_labels2d.png').exists()
        assert set(yaml.safe_load((predictions / 'inference.yaml').read_text())) == {'domain_0', 'domain_1'}

        result = runner.invoke(main, base + ['evaluate', str(root / 'data'), '--predictions', str(predictions),
                                             '-o', str(metrics)])
        assert result.exit_code == 0, result.output
        assert 'total' in result.output
        record = yaml.safe_load(metrics.read_text())
        assert record['mapping'] is None
        assert 0.0 <= record['total']['2d']['accuracy'] <= 1.0

    def test_evaluate_binary_mapping(self, workspace):
        root, runner, base = workspace
        model, predictions = root / 'initial_model', root / 'initial_predictions'
        assert runner.invoke(main, base + ['train', str(root / 'data'), '-o', str(model),
                                           '--variant', 'initial']).exit_code == 0
        assert runner.invoke(main, base + ['infer', str(root / 'data'), '--model', str(model),
                                           '-o', str(predictions), '--variant', 'initial']).exit_code == 0
        result = runner.invoke(main, base + ['evaluate', str(root / 'data'), '--predictions', str(predictions),
                                             '--mapping', 'four_to_binary'])
        assert result.exit_code == 0, result.output
        assert 'iou_non-ground' in result.output

    def test_missing_predictions(self, workspace, tmp_path):
        root, runner, base = workspace
        result = runner.invoke(main, base + ['evaluate', str(root / 'data'), '--predictions', str(tmp_path)])
        assert result.exit_code == 2
        assert 'Missing predictions' in result.output

    def test_cross_validate(self, workspace):
        root, runner, base = workspace
        result = runner.invoke(main, base + ['--verbose', 'cross-validate', str(root / 'data'),
                                             '--variant', 'initial', '-o', str(root / 'cv.yaml')])
        assert result.exit_code == 0, result.output
        assert 'Fold domain_0: training on domain_1' in result.output
        record = yaml.safe_load((root / 'cv.yaml').read_text())
        assert set(record['folds']) == {'domain_0', 'domain_1'}
        assert 'initial' in record['totals']
