"""Image embedder training, inference, class means and feature files."""

import numpy as np
import pytest

from kgrec import image
from kgrec.ioutil import SchemaError


def unit_rows(rng, n, d):
    rows = rng.normal(size=(n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def identity_embedder(d):
    return image.ImageEmbedder([np.eye(d)], [np.zeros(d)])


class TestTrainEmbedder:
    def test_identity_recovery(self):
        rng = np.random.default_rng(0)
        targets = unit_rows(rng, 8, 6)
        data = [
            image.LabeledFeature(f"img{i}", i % 8, targets[i % 8].copy())
            for i in range(64)
        ]
        config = image.EmbedderConfig(hidden=(), dropout_rate=0.0, epochs=150,
                                      batch_size=16, learning_rate=0.01, seed=1)
        _, losses = image.train_embedder(data, targets, config)
        assert losses[-1] < 1e-3 * losses[0]
        assert losses[-1] < losses[0]

    def test_zero_learning_rate_keeps_parameters_and_loss(self):
        rng = np.random.default_rng(2)
        targets = unit_rows(rng, 4, 5)
        data = [image.LabeledFeature(f"i{i}", i % 4, rng.normal(size=5))
                for i in range(16)]
        config = image.EmbedderConfig(hidden=(8,), dropout_rate=0.0, epochs=5,
                                      batch_size=8, learning_rate=0.0, seed=3)
        embedder, losses = image.train_embedder(data, targets, config)
        fresh, _ = image.train_embedder(data, targets, config)
        for w1, w2 in zip(embedder.weights, fresh.weights):
            assert np.array_equal(w1, w2)
        assert max(losses) - min(losses) < 1e-12

    def test_noisy_recovery_cosine(self):
        rng = np.random.default_rng(4)
        targets = unit_rows(rng, 10, 8)
        train, held = [], []
        for c in range(10):
            for j in range(30):
                feat = targets[c] + rng.normal(0, 0.05, size=8)
                item = image.LabeledFeature(f"c{c}_{j}", c, feat)
                (train if j < 20 else held).append(item)
        config = image.EmbedderConfig(hidden=(32,), dropout_rate=0.0, epochs=120,
                                      batch_size=32, learning_rate=0.005, seed=5)
        embedder, _ = image.train_embedder(train, targets, config)
        cosines = [
            float(np.dot(image.embed(embedder, item.feature), targets[item.entity]))
            for item in held
        ]
        assert np.mean(cosines) > 0.9

    def test_missing_target_row_rejected(self):
        targets = np.zeros((2, 3))
        data = [image.LabeledFeature("a", 5, np.zeros(3))]
        with pytest.raises(ValueError, match="target row"):
            image.train_embedder(data, targets, image.EmbedderConfig())

    def test_dropout_train_inference_asymmetry(self):
        rng = np.random.default_rng(6)
        embedder = image.ImageEmbedder(
            [rng.normal(size=(16, 8)), rng.normal(size=(4, 16))],
            [np.zeros(16), np.zeros(4)],
            dropout_rate=0.3,
        )
        X = rng.normal(size=(5, 8))
        train_rng = np.random.default_rng(7)
        y1, _ = embedder.forward_train(X, train_rng)
        y2, _ = embedder.forward_train(X, train_rng)
        assert not np.allclose(y1, y2)
        e1 = image.embed_batch(embedder, X)
        e2 = image.embed_batch(embedder, X)
        assert np.array_equal(e1, e2)


class TestEmbed:
    def test_output_unit_norm(self):
        rng = np.random.default_rng(1)
        embedder = image.ImageEmbedder(
            [rng.normal(size=(8, 5)), rng.normal(size=(3, 8))],
            [rng.normal(size=8), rng.normal(size=3)],
        )
        for _ in range(50):
            out = image.embed(embedder, rng.normal(size=5))
            assert abs(np.linalg.norm(out) - 1.0) <= 1e-9

    def test_pure_function(self):
        rng = np.random.default_rng(2)
        embedder = identity_embedder(4)
        x = rng.normal(size=4)
        assert np.array_equal(image.embed(embedder, x), image.embed(embedder, x))

    def test_identity_network_unit_basis(self):
        embedder = identity_embedder(3)
        e1 = np.array([1.0, 0.0, 0.0])
        assert np.allclose(image.embed(embedder, e1), e1)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError, match="dimension"):
            image.embed(identity_embedder(3), np.zeros(4))

    def test_zero_output_rejected_not_nan(self):
        embedder = image.ImageEmbedder([np.zeros((3, 3))], [np.zeros(3)])
        with pytest.raises(ValueError, match="vanished"):
            image.embed(embedder, np.ones(3))


class TestClassMean:
    def test_idempotent_mean(self):
        v = np.array([1.0, 0.0])
        assert np.allclose(image.class_mean([v, v]), v)

    def test_diagonal_mean(self):
        out = image.class_mean([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
        assert np.allclose(out, [0.7071, 0.7071], atol=1e-4)
        assert abs(np.linalg.norm(out) - 1.0) <= 1e-12

    def test_singleton_renormalized(self):
        out = image.class_mean([np.array([0.0, 2.0])])
        assert np.allclose(out, [0.0, 1.0])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            image.class_mean([])

    def test_cancelling_vectors_rejected(self):
        with pytest.raises(ValueError, match="vanished"):
            image.class_mean([np.array([1.0, 0.0]), np.array([-1.0, 0.0])])


class TestFeatureFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        records = [
            image.FeatureRecord("img1", "dog", rng.normal(size=4)),
            image.FeatureRecord("img2", "?", rng.normal(size=4)),
        ]
        path = tmp_path / "f.features"
        image.write_features(path, records, 4)
        back, dim = image.read_features(path)
        assert dim == 4
        assert [r.image_id for r in back] == ["img1", "img2"]
        assert back[1].label == "?"
        for a, b in zip(records, back):
            assert np.array_equal(a.vector, b.vector)

    def test_header_required(self, tmp_path):
        p = tmp_path / "bad.features"
        p.write_text("img1\tdog\t1.0,2.0\n")
        with pytest.raises(SchemaError, match="schema-version"):
            image.read_features(p)

    def test_dimension_mismatch_in_record(self, tmp_path):
        p = tmp_path / "bad.features"
        p.write_text("#kgrec-features-v1 dim=3\nimg1\tdog\t1.0,2.0\n")
        with pytest.raises(ValueError, match="declared dim"):
            image.read_features(p)

    def test_write_validates_dimension(self, tmp_path):
        rec = image.FeatureRecord("a", "x", np.zeros(2))
        with pytest.raises(ValueError, match="dimension"):
            image.write_features(tmp_path / "f", [rec], 3)


class TestEmbedderCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        embedder = image.ImageEmbedder(
            [rng.normal(size=(6, 4)), rng.normal(size=(2, 6))],
            [rng.normal(size=6), rng.normal(size=2)],
        )
        image.save_embedder(embedder, tmp_path / "e.json")
        back = image.load_embedder(tmp_path / "e.json")
        assert back.dims == [4, 6, 2]
        for w1, w2 in zip(embedder.weights, back.weights):
            assert np.array_equal(w1, w2)
        x = rng.normal(size=4)
        assert np.array_equal(image.embed(embedder, x), image.embed(back, x))

    def test_schema_mismatch(self, tmp_path):
        (tmp_path / "bad.json").write_text('{"format": "other"}')
        with pytest.raises(SchemaError):
            image.load_embedder(tmp_path / "bad.json")
