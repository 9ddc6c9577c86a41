"""Tests for model checkpoints."""

import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest
import yaml

from src.core.exceptions import DataFormatError
from src.core.models import FOUR_CLASS, LabelSet
from src.core.weights import WeightSet
from src.lidar.classifier import ConstantClassifier, LogisticPointClassifier
from src.state.checkpoint import (
    CheckpointManager,
    load_classifier,
    load_weights,
    save_classifier,
    save_weights,
)


BINARY = LabelSet(("ground", "non-ground"))


class TestWeightCheckpoints:
    """Test WeightSet files."""

    def setup_method(self):
        """Create a scratch directory."""
        self.directory = Path(tempfile.mkdtemp())
        self.weights = WeightSet.random(4, np.random.default_rng(0), scale=0.5, bias_scale=0.2, l2_lambda=0.3)

    def teardown_method(self):
        """Remove the scratch directory."""
        shutil.rmtree(self.directory, ignore_errors=True)

    def test_round_trip(self):
        path = self.directory / "weights.yaml"
        save_weights(path, self.weights, FOUR_CLASS)
        loaded = load_weights(path, FOUR_CLASS)

        assert np.allclose(loaded.to_vector(), self.weights.to_vector())
        assert loaded.l2_lambda == 0.3
        assert loaded.labels == FOUR_CLASS.names

    def test_record_names_the_labels(self):
        path = self.directory / "weights.yaml"
        save_weights(path, self.weights, FOUR_CLASS)
        record = yaml.safe_load(path.read_text())

        assert record["format_version"] == 1
        assert record["labels"] == ["ground", "sky", "vegetation", "object"]
        assert len(record["w2d3d"]) == 4

    def test_label_mismatch(self):
        path = self.directory / "weights.yaml"
        save_weights(path, WeightSet.zeros(2), BINARY)
        with pytest.raises(DataFormatError, match="uses labels"):
            load_weights(path, LabelSet(("road", "rest")))

    def test_count_mismatch_on_save(self):
        with pytest.raises(DataFormatError, match="label set has 2"):
            save_weights(self.directory / "weights.yaml", self.weights, BINARY)

    def test_wrong_version(self):
        path = self.directory / "weights.yaml"
        save_weights(path, self.weights, FOUR_CLASS)
        record = yaml.safe_load(path.read_text())
        record["format_version"] = 2
        path.write_text(yaml.safe_dump(record))

        with pytest.raises(DataFormatError, match="format_version 2"):
            load_weights(path)

    def test_asymmetric_matrix_is_rejected(self):
        path = self.directory / "weights.yaml"
        save_weights(path, WeightSet.zeros(2), BINARY)
        record = yaml.safe_load(path.read_text())
        record["w2d"] = [[0.0, 1.0], [0.0, 0.0]]
        path.write_text(yaml.safe_dump(record))

        with pytest.raises(DataFormatError, match="Invalid WeightSet"):
            load_weights(path)

    def test_missing_matrix(self):
        path = self.directory / "weights.yaml"
        path.write_text(yaml.safe_dump({"format_version": 1, "labels": ["a", "b"]}))
        with pytest.raises(DataFormatError, match="Malformed"):
            load_weights(path)

    def test_missing_file(self):
        with pytest.raises(DataFormatError, match="not found"):
            load_weights(self.directory / "absent.yaml")

    def test_invalid_yaml(self):
        path = self.directory / "weights.yaml"
        path.write_text("labels: [a, b\n")
        with pytest.raises(DataFormatError, match="Invalid YAML"):
            load_weights(path)

    def test_not_a_mapping(self):
        path = self.directory / "weights.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(DataFormatError, match="not a mapping"):
            load_weights(path)


class TestClassifierCheckpoints:
    """Test point-classifier files."""

    def setup_method(self):
        self.directory = Path(tempfile.mkdtemp())

    def teardown_method(self):
        shutil.rmtree(self.directory, ignore_errors=True)

    def test_constant_round_trip(self):
        path = self.directory / "classifier.yaml"
        save_classifier(path, ConstantClassifier(FOUR_CLASS))
        loaded = load_classifier(path, FOUR_CLASS)
        assert isinstance(loaded, ConstantClassifier)
        assert np.allclose(loaded.probabilities, [1 / 3, 0.0, 1 / 3, 1 / 3])

    def test_logistic_round_trip(self):
        rng = np.random.default_rng(1)
        features = rng.normal(size=(60, 3))
        labels = (features[:, 0] > 0).astype(int)
        classifier = LogisticPointClassifier.fit(features, labels, BINARY)

        path = self.directory / "classifier.yaml"
        save_classifier(path, classifier)
        loaded = load_classifier(path)
        assert np.allclose(loaded.predict_proba(features), classifier.predict_proba(features))

    def test_unknown_kind(self):
        path = self.directory / "classifier.yaml"
        path.write_text(yaml.safe_dump({"format_version": 1, "kind": "forest", "labels": ["a", "b"]}))
        with pytest.raises(DataFormatError, match="Malformed classifier"):
            load_classifier(path)

    def test_label_mismatch(self):
        path = self.directory / "classifier.yaml"
        save_classifier(path, ConstantClassifier(FOUR_CLASS))
        with pytest.raises(DataFormatError, match="uses labels"):
            load_classifier(path, BINARY)


class TestCheckpointManager:
    """Test model directories."""

    def setup_method(self):
        self.directory = Path(tempfile.mkdtemp()) / "model"
        self.manager = CheckpointManager(self.directory)

    def teardown_method(self):
        shutil.rmtree(self.directory.parent, ignore_errors=True)

    def test_save_and_load(self):
        weights = WeightSet.zeros(4)
        self.manager.save(weights, ConstantClassifier(FOUR_CLASS), FOUR_CLASS, info={"split": "none"})

        assert self.manager.exists()
        loaded_weights, classifier = self.manager.load(FOUR_CLASS)
        assert np.array_equal(loaded_weights.to_vector(), weights.to_vector())
        assert classifier.labels == FOUR_CLASS

    def test_info_record(self):
        self.manager.save(WeightSet.zeros(2), ConstantClassifier(BINARY), BINARY, info={"frames": 6})
        info = self.manager.info()
        assert info["frames"] == 6
        assert info["labels"] == ["ground", "non-ground"]
        assert "saved_at" in info

    def test_empty_directory(self):
        assert not self.manager.exists()
        assert self.manager.info() == {}
        with pytest.raises(DataFormatError, match="No model checkpoint"):
            self.manager.load()

    def test_loaded_labels_must_match(self):
        self.manager.save(WeightSet.zeros(2), ConstantClassifier(BINARY), BINARY)
        with pytest.raises(DataFormatError):
            self.manager.load(LabelSet(("road", "rest")))
