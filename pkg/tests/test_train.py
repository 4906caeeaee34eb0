import numpy as np
import pytest

from verdoc.errors import NoRegions
from verdoc.mlp import TrainConfig, backward, init_model, predict
from verdoc.properties import DELETION, INSERTION, PropertySpec, presets, region_arrays
from verdoc.train import (Dataset, adv_retrain, classification_metrics, confusion, evaluate, fit_arrays,
                          full_subtree_variants, train_regular, train_robust)
from verdoc.verify import robust_loss, vra

SMALL = dict(hidden=(16, 16), epochs=6, rng_seed=1)


def small_dataset(corpus):
    ds = corpus["ds"]
    return Dataset(ds.X_train[::3], ds.y_train[::3], ds.X_test, ds.y_test,
                   ds.ids_train[::3], ds.ids_test)


def test_split_is_stratified_and_disjoint(corpus400):
    ds = corpus400["ds"]
    assert not set(ds.ids_train) & set(ds.ids_test)
    assert len(ds.X_test) == 120 and ds.y_test.sum() == 60
    with pytest.raises(ValueError):
        Dataset(ds.X_train, ds.y_train + 2, ds.X_test, ds.y_test)


def test_separable_toy_reaches_full_accuracy():
    X = np.array([[0, 1], [1, 0]] * 20, np.uint8)
    y = np.array([0, 1] * 20)
    model = fit_arrays(X, y, TrainConfig(hidden=(4,), epochs=30, batch_size=8))
    assert (predict(model, X) == y).all()


def test_loss_decreases_on_average(corpus400):
    hist = []
    train_regular(small_dataset(corpus400), TrainConfig(**SMALL), history=hist)
    losses = [h["regular"] for h in hist]
    assert np.mean(losses[-2:]) < np.mean(losses[:2])


def test_determinism(corpus400):
    ds = small_dataset(corpus400)
    a = train_regular(ds, TrainConfig(**SMALL))
    b = train_regular(ds, TrainConfig(**SMALL))
    assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))


def test_point_region_robust_loss_is_regular_loss(corpus400):
    model = init_model(corpus400["vocab"].dim, (8,), seed=2)
    X = corpus400["X"][corpus400["y"] == 1][:10]
    spec = PropertySpec(INSERTION, 0)
    lowers, uppers = zip(*(region_arrays(x, corpus400["vocab"], spec) for x in X))
    r = robust_loss(model, np.concatenate(lowers), np.concatenate(uppers), np.ones(10, int))
    g = backward(model, X, np.ones(10, int))
    assert np.isclose(r.loss, g.loss)
    assert all(np.allclose(a, b, atol=1e-12) for a, b in zip(r.params(), g.params()))


def test_robust_training_raises_vra(corpus400):
    ds = small_dataset(corpus400)
    vocab = corpus400["vocab"]
    spec = presets(vocab.n_subtrees)["B"]
    cfg = TrainConfig(**SMALL)
    before = vra(train_regular(ds, cfg), ds.malicious_test, vocab, spec)
    hist = []
    after_model = train_robust(ds, [spec], cfg, vocab, history=hist)
    after = vra(after_model, ds.malicious_test, vocab, spec)
    assert after > before
    assert set(hist[0]) == {"epoch", "regular", "robust_B"}


def test_robust_without_regions():
    X = np.zeros((4, 3), np.uint8)
    from verdoc.featurespace import Vocabulary
    vocab = Vocabulary.from_paths([("A",), ("B",), ("C",)])
    ds = Dataset(X, [0, 1, 0, 1], X[:2], [0, 1], ["a", "b", "c", "d"], ["e", "f"])
    with pytest.raises(NoRegions):
        train_robust(ds, [PropertySpec(DELETION, 1)], TrainConfig(**SMALL), vocab)


def test_augmentation_bookkeeping(corpus400):
    vocab = corpus400["vocab"]
    X = corpus400["X"][corpus400["y"] == 1][:15]
    for name in "AB":
        spec = presets(vocab.n_subtrees)[name]
        v = full_subtree_variants(X, vocab, spec)
        expected = 0
        for x in X:
            lo, up = region_arrays(x, vocab, spec)
            corners = lo if name == "A" else up
            expected += int((~(corners == x).all(axis=1)).sum())
        assert len(v) == expected
    assert len(full_subtree_variants(X, vocab, PropertySpec(INSERTION, 0))) == 0


def test_adv_retrain_runs(corpus400):
    ds = small_dataset(corpus400)
    vocab = corpus400["vocab"]
    hist = []
    model = adv_retrain(ds, [presets(vocab.n_subtrees)["B"]],
                        TrainConfig(**{**SMALL, "epochs": 3}), vocab, history=hist)
    assert len(hist) == 3 and hist[0]["attack_examples"] == 0
    assert classification_metrics(ds.y_test, predict(model, ds.X_test)).accuracy > 0.9


def test_metrics():
    y = np.array([0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1])
    p = np.array([0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0])
    c = confusion(y, p)
    assert c == {"tp": 8, "fp": 2, "tn": 7, "fn": 3}
    m = classification_metrics(y, p)
    assert (m.accuracy, m.fpr, m.precision, m.recall) == (15 / 20, 2 / 9, 8 / 10, 8 / 11)
    assert classification_metrics([1, 1], [1, 1]).accuracy == 1.0
    assert classification_metrics([0, 0, 1], [1, 1, 1]).fpr == 1.0


def test_evaluate_fields(corpus400):
    ds = small_dataset(corpus400)
    vocab = corpus400["vocab"]
    model = train_regular(ds, TrainConfig(**SMALL))
    specs = list(presets(vocab.n_subtrees).values())
    m = evaluate(model, ds, specs, vocab)
    assert set(m.vra) == set(m.era) == set("ABCDE")
    assert all(m.vra[k] <= m.era[k] for k in m.vra)
    assert 0 <= m.fpr <= 1 and m.to_json()["train_minutes"] is None
