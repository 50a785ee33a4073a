import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from reco.estimators import RecoFusion, RecoZeroShotClassifier
from reco.evaluation import zero_shot_classify
from reco.exceptions import ConfigError


@pytest.fixture(scope="module")
def fitted(small_world):
    est = RecoFusion(memory=small_world.memory, epochs=1, batch_size=128, k=5, exclude_self=True)
    return est.fit(small_world.train.image, small_world.train.text)


@pytest.fixture(scope="module")
def small_world():
    from conftest import SMALL_WORLD
    from reco.synthworld import WorldSpec, generate_world

    return generate_world(WorldSpec(**SMALL_WORLD))


def test_params_round_trip(small_world):
    est = RecoFusion(memory=small_world.memory, heads=2, k=3)
    params = est.get_params()
    assert params["heads"] == 2 and params["k"] == 3
    twin = clone(est)
    assert twin.get_params()["k"] == 3 and twin.memory.equals(small_world.memory)
    est.set_params(k=7)
    assert est.k == 7


def test_fit_requires_memory(small_world):
    with pytest.raises(ConfigError):
        RecoFusion().fit(small_world.train.image, small_world.train.text)


def test_fit_validates_shapes(small_world):
    est = RecoFusion(memory=small_world.memory, epochs=1)
    with pytest.raises(ValueError):
        est.fit(small_world.train.image[:, :10], small_world.train.text)
    with pytest.raises(ValueError):
        est.fit(small_world.train.image[:100], small_world.train.text[:90])


def test_transform_before_fit(small_world):
    with pytest.raises(NotFittedError):
        RecoFusion(memory=small_world.memory).transform(small_world.task.queries)


def test_transform_outputs(fitted, small_world):
    assert fitted.n_features_in_ == 64 and len(fitted.history_) == len(small_world.train) // 128
    X = small_world.task.queries[:50]
    out = fitted.transform(X)
    assert out.shape == X.shape
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)
    xb, yb = fitted.transform(X, small_world.task.query_text[:50])
    assert np.array_equal(xb, out) and yb.shape == X.shape


def test_classifier_matches_functional_path(fitted, small_world):
    task = small_world.task
    for mode in ("none", "image", "text", "both"):
        clf = RecoZeroShotClassifier(fusion=fitted, mode=mode).fit(task.class_embeddings)
        acc = clf.score(task.queries, task.labels)
        expect = zero_shot_classify(task, fitted.params_, small_world.memory, mode, fitted.k)
        assert acc == expect


def test_classifier_labels_and_errors(small_world):
    task = small_world.task
    names = np.array([f"class{i}" for i in range(task.n_classes)])
    clf = RecoZeroShotClassifier(mode="none", classes=names).fit(task.class_embeddings)
    assert clf.predict(task.queries[:3]).dtype.kind == "U"
    with pytest.raises(ValueError):
        RecoZeroShotClassifier(mode="none", classes=names[:3]).fit(task.class_embeddings)
    with pytest.raises(ConfigError):
        RecoZeroShotClassifier(mode="both").fit(task.class_embeddings)
    with pytest.raises(NotFittedError):
        RecoZeroShotClassifier(mode="none").predict(task.queries)
