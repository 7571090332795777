import numpy as np
import pytest
from sklearn.base import clone

from lslu import LSLUClassifier
from lslu.checkpoint import decode, encode
from lslu.data import synthetic_blobs
from lslu.errors import EmptyDataset


@pytest.fixture(scope="module")
def blobs():
    return synthetic_blobs(3, 40, channels=1, height=8, width=8, seed=0), synthetic_blobs(3, 20, 1, 8, 8, seed=0, split="test")


@pytest.fixture(scope="module")
def fitted(blobs):
    train, test = blobs
    clf = LSLUClassifier(arch="mini-resnet", blocks=(1,), width=6, insertion="full", epochs=8, batch_size=16, lr=5e-3, dropout=0.2)
    return clf.fit(train.images, train.labels, test.images, test.labels)


def test_get_params_and_clone():
    clf = LSLUClassifier(width=12, n_terms=2)
    params = clf.get_params()
    assert params["width"] == 12 and params["n_terms"] == 2
    twin = clone(clf)
    assert twin.get_params() == params and twin is not clf
    assert clf.set_params(lr=0.5).lr == 0.5


def test_fit_predict(fitted, blobs):
    _, test = blobs
    assert fitted.score(test.images, test.labels) >= 0.99
    assert len(fitted.history_) == 8
    assert set(fitted.history_[0]) >= {"epoch", "train_loss", "val_acc", "lr"}


def test_predict_proba(fitted, blobs):
    proba = fitted.predict_proba(blobs[1].images)
    assert proba.shape == (60, 3) and np.allclose(proba.sum(axis=1), 1.0)
    np.testing.assert_array_equal(proba.argmax(1), fitted.predict(blobs[1].images))


def test_evaluate(fitted, blobs):
    test = blobs[1]
    result = fitted.evaluate(test.images, test.labels)
    counts = np.bincount(test.labels)
    weighted = sum(result["per_class"][k] * counts[k] for k in range(3)) / counts.sum()
    assert result["top1"] == pytest.approx(weighted) and result["n"] == 60
    with pytest.raises(EmptyDataset):
        fitted.evaluate(test.images[:0], test.labels[:0])


def test_string_labels(blobs):
    train = blobs[0]
    names = np.array(["cat", "dog", "emu"])[train.labels]
    clf = LSLUClassifier(arch="mini-resnet", blocks=(1,), width=4, epochs=1, batch_size=32).fit(train.images, names)
    assert set(clf.predict(train.images)) <= set(names)


def test_trajectories_start_at_init(fitted):
    first = [r for r in fitted.trajectories_ if r.epoch == 0]
    assert all(r.value == 1.0 for r in first if r.kind == "theta")
    assert all(r.value == 0.0 for r in first if r.kind == "omega")


def test_checkpoint_round_trip(fitted, blobs):
    raw = encode(fitted.checkpoint_tensors(), fitted.checkpoint_meta())
    ckpt = decode(raw)
    assert ckpt.meta["estimator"]["dropout"] == 0.2
    back = LSLUClassifier.from_checkpoint(ckpt)
    x = blobs[1].images
    np.testing.assert_array_equal(back.decision_function(x), fitted.decision_function(x))


def test_unfitted_and_bad_input():
    clf = LSLUClassifier()
    with pytest.raises(Exception):
        clf.predict(np.zeros((1, 1, 8, 8)))
    with pytest.raises(ValueError):
        clf.fit(np.zeros((4, 8, 8)), [0, 1, 0, 1])


def test_seed_reproducible(blobs):
    train = blobs[0]
    kw = dict(arch="mini-resnet", blocks=(1,), width=4, epochs=2, batch_size=16, seed=3)
    a = LSLUClassifier(**kw).fit(train.images, train.labels)
    b = LSLUClassifier(**kw).fit(train.images, train.labels)
    for k, v in a.graph_.state_dict().items():
        assert np.asarray(v).tobytes() == np.asarray(b.graph_.state_dict()[k]).tobytes()
