"""Hashed features, deterministic training, and model archive round-trips."""

import json
import math

import numpy as np
import pytest

from latticelab.classifier import (
    FeatureSpec,
    ModelFormatError,
    ProxyModel,
    TrainingError,
    TrainSettings,
    featurize,
    load_model,
    loss_and_gradient,
    predict_proba,
    save_model,
    train,
)
from latticelab.metrics import accuracy

SMALL_SPEC = FeatureSpec(n_features=2**12)

ZEBRA_SET = [
    ("the zebra runs across the field", 1),
    ("a striped zebra stands near the water", 1),
    ("that zebra is eating grass again", 1),
    ("the boy is standing on a stool", 0),
    ("mother is washing dishes at the sink", 0),
    ("the water is overflowing onto the floor", 0),
]


def test_featurize_empty_text_is_zero_vector():
    assert featurize("", SMALL_SPEC) == {}


def test_featurize_deterministic():
    assert featurize("the boy", SMALL_SPEC) == featurize("the boy", SMALL_SPEC)


def test_featurize_single_char_trigram():
    spec = FeatureSpec(word_ngram_orders=(), char_ngram_orders=(3,), n_features=2**10)
    counts = featurize("aaa", spec)
    assert list(counts.values()) == [1.0]


def test_featurize_counts_repeats():
    spec = FeatureSpec(word_ngram_orders=(1,), char_ngram_orders=(), n_features=2**10)
    counts = featurize("a b a", spec)
    assert sorted(counts.values()) == [1.0, 2.0]


def test_feature_spec_validation():
    with pytest.raises(ValueError):
        FeatureSpec(n_features=1000)  # not a power of two
    with pytest.raises(ValueError):
        FeatureSpec(word_ngram_orders=(0,))
    with pytest.raises(ValueError):
        TrainSettings(learning_rate=0)
    with pytest.raises(ValueError):
        TrainSettings(max_iterations=-1)


def test_train_separable_set_reaches_full_accuracy():
    model = train(ZEBRA_SET, spec=SMALL_SPEC, seed=0)
    probs = predict_proba(model, [t for t, _ in ZEBRA_SET])
    predicted = (probs >= 0.5).astype(int).tolist()
    assert accuracy(predicted, [y for _, y in ZEBRA_SET]) == 1.0


def test_train_zero_iterations_predicts_half():
    settings = TrainSettings(max_iterations=0)
    model = train(ZEBRA_SET, spec=SMALL_SPEC, settings=settings)
    assert predict_proba(model, "anything at all") == pytest.approx(0.5)
    assert not model.weights.any()


def test_train_is_deterministic():
    first = train(ZEBRA_SET, spec=SMALL_SPEC, seed=3)
    second = train(ZEBRA_SET, spec=SMALL_SPEC, seed=3)
    assert np.array_equal(first.weights, second.weights)
    assert first.bias == second.bias
    probe = "the zebra on a stool"
    assert predict_proba(first, probe) == predict_proba(second, probe)


def test_train_order_invariant():
    shuffled = [ZEBRA_SET[i] for i in (4, 0, 5, 2, 1, 3)]
    base = train(ZEBRA_SET, spec=SMALL_SPEC)
    other = train(shuffled, spec=SMALL_SPEC)
    texts = [t for t, _ in ZEBRA_SET]
    np.testing.assert_allclose(
        predict_proba(base, texts), predict_proba(other, texts), atol=1e-12
    )


def test_train_loss_never_exceeds_zero_start():
    model = train(ZEBRA_SET, spec=SMALL_SPEC)
    # Zero weights give mean loss ln 2; descent with step halving can only
    # go down from there.
    assert model.final_loss <= math.log(2.0) + 1e-12


def test_heavy_l2_pushes_probabilities_to_half():
    settings = TrainSettings(l2_penalty=1e6)
    model = train(ZEBRA_SET, spec=SMALL_SPEC, settings=settings)
    probs = predict_proba(model, [t for t, _ in ZEBRA_SET])
    np.testing.assert_allclose(probs, 0.5, atol=1e-3)


def test_train_rejects_degenerate_datasets():
    with pytest.raises(TrainingError):
        train([], spec=SMALL_SPEC)
    with pytest.raises(TrainingError):
        train([("only one class", 1), ("still one class", 1)], spec=SMALL_SPEC)
    with pytest.raises(TrainingError):
        train([("a", 2), ("b", 0)], spec=SMALL_SPEC)


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(21)
    for _ in range(10):
        n, d = int(rng.integers(3, 8)), 16
        features = rng.normal(size=(n, d))
        labels = rng.integers(0, 2, size=n).astype(np.float64)
        weights = rng.normal(scale=0.5, size=d)
        bias = float(rng.normal())
        l2 = float(rng.uniform(0, 0.1))
        _, grad_w, grad_b = loss_and_gradient(weights, bias, features, labels, l2)

        eps = 1e-6
        for j in range(d):
            up, down = weights.copy(), weights.copy()
            up[j] += eps
            down[j] -= eps
            fd = (
                loss_and_gradient(up, bias, features, labels, l2)[0]
                - loss_and_gradient(down, bias, features, labels, l2)[0]
            ) / (2 * eps)
            assert abs(grad_w[j] - fd) <= 1e-5 * max(1.0, abs(fd))
        fd_b = (
            loss_and_gradient(weights, bias + eps, features, labels, l2)[0]
            - loss_and_gradient(weights, bias - eps, features, labels, l2)[0]
        ) / (2 * eps)
        assert abs(grad_b - fd_b) <= 1e-5 * max(1.0, abs(fd_b))


def test_predict_proba_zero_weight_model():
    model = ProxyModel(
        spec=SMALL_SPEC,
        settings=TrainSettings(),
        weights=np.zeros(SMALL_SPEC.n_features),
        bias=0.0,
        idf=np.ones(SMALL_SPEC.n_features),
        seed=0,
        final_loss=math.log(2.0),
    )
    assert predict_proba(model, "the boy") == pytest.approx(0.5)


def test_predict_proba_monotone_in_present_feature():
    model = train(ZEBRA_SET, spec=SMALL_SPEC)
    text = "the zebra"
    base = predict_proba(model, text)
    bumped_weights = model.weights.copy()
    idx = next(iter(featurize("zebra", FeatureSpec(
        word_ngram_orders=(1,), char_ngram_orders=(), n_features=SMALL_SPEC.n_features
    ))))
    bumped_weights[idx] += 1.0
    bumped = ProxyModel(
        spec=model.spec,
        settings=model.settings,
        weights=bumped_weights,
        bias=model.bias,
        idf=model.idf,
        seed=model.seed,
        final_loss=model.final_loss,
    )
    assert predict_proba(bumped, text) > base


def test_predict_proba_batch_matches_singles():
    model = train(ZEBRA_SET, spec=SMALL_SPEC)
    texts = ["the zebra", "the stool", ""]
    batch = predict_proba(model, texts)
    assert batch.shape == (3,)
    for text, prob in zip(texts, batch):
        assert predict_proba(model, text) == pytest.approx(float(prob))


def test_save_load_round_trip(tmp_path):
    model = train(ZEBRA_SET, spec=SMALL_SPEC, seed=11)
    path = tmp_path / "model.npz"
    save_model(model, path)
    loaded = load_model(path)
    assert np.array_equal(loaded.weights, model.weights)
    assert loaded.bias == model.bias
    assert loaded.seed == 11
    texts = [t for t, _ in ZEBRA_SET]
    np.testing.assert_array_equal(
        predict_proba(loaded, texts), predict_proba(model, texts)
    )


def test_load_rejects_wrong_version(tmp_path):
    model = train(ZEBRA_SET, spec=SMALL_SPEC)
    path = tmp_path / "model.npz"
    save_model(model, path)
    with np.load(path, allow_pickle=False) as archive:
        fields = {k: archive[k] for k in archive.files}
    meta = json.loads(str(fields["meta"]))
    meta["format_version"] = 99
    fields["meta"] = np.str_(json.dumps(meta, sort_keys=True))
    np.savez_compressed(path, **fields)
    with pytest.raises(ModelFormatError):
        load_model(path)


def test_load_rejects_tampered_weights(tmp_path):
    model = train(ZEBRA_SET, spec=SMALL_SPEC)
    path = tmp_path / "model.npz"
    save_model(model, path)
    with np.load(path, allow_pickle=False) as archive:
        fields = {k: archive[k] for k in archive.files}
    weights = fields["weights"].copy()
    weights[0] += 1.0
    fields["weights"] = weights
    np.savez_compressed(path, **fields)
    with pytest.raises(ModelFormatError):
        load_model(path)


def test_load_rejects_missing_field(tmp_path):
    model = train(ZEBRA_SET, spec=SMALL_SPEC)
    path = tmp_path / "model.npz"
    save_model(model, path)
    with np.load(path, allow_pickle=False) as archive:
        fields = {k: archive[k] for k in archive.files}
    del fields["idf"]
    np.savez_compressed(path, **fields)
    with pytest.raises(ModelFormatError):
        load_model(path)
