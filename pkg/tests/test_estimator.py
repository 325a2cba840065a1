import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from seeaunet.data import synth_dataset
from seeaunet.errors import ValidationError
from seeaunet.estimator import SegmentationEstimator
from seeaunet.validation import check_divisible, check_images, check_masks


@pytest.fixture(scope="module")
def xy():
    s = synth_dataset(6, (16, 16), seed=5)
    return np.stack([x.image for x in s]), np.stack([x.mask[0] for x in s])


def small(**kw):
    return SegmentationEstimator(base_filters=4, depth=2, se_reduction=2, epochs=1, batch_size=3, **kw)


def test_params_round_trip_and_clone():
    est = small(arch="unet", lr=0.003)
    params = est.get_params()
    assert params["arch"] == "unet" and params["lr"] == 0.003
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(epochs=2)
    assert est.epochs == 2


def test_fit_predict_score(xy):
    X, y = xy
    est = small().fit(X, y)
    proba = est.predict_proba(X)
    assert proba.shape == (6, 1, 16, 16) and np.all((proba > 0) & (proba < 1))
    pred = est.predict(X)
    assert pred.dtype == np.uint8 and set(np.unique(pred)) <= {0, 1}
    assert 0.0 <= est.score(X, y) <= 1.0
    assert len(est.report_.rows) == 1
    loss, soft, hard = est.evaluate(X, y)
    assert loss > 0


def test_not_fitted():
    with pytest.raises(NotFittedError):
        small().predict(np.zeros((1, 3, 16, 16)))


def test_fit_is_deterministic(xy):
    X, y = xy
    a = small(seed=2).fit(X, y).predict_proba(X)
    b = small(seed=2).fit(X, y).predict_proba(X)
    assert a.tobytes() == b.tobytes()


def test_save_load(xy, tmp_path):
    X, y = xy
    est = small().fit(X, y)
    est.save(tmp_path / "e.ckpt")
    again = SegmentationEstimator.load(tmp_path / "e.ckpt")
    assert again.get_params() == est.get_params()
    assert again.predict_proba(X).tobytes() == est.predict_proba(X).tobytes()


def test_input_validation():
    with pytest.raises(ValidationError):
        check_images(np.zeros((2, 16, 16)))
    with pytest.raises(ValidationError):
        check_images(np.full((1, 3, 4, 4), 2.0))
    with pytest.raises(ValidationError):
        check_images(np.full((1, 3, 4, 4), np.nan))
    assert check_images(np.zeros((3, 4, 4))).shape == (1, 3, 4, 4)
    with pytest.raises(ValidationError):
        check_masks(np.full((1, 4, 4), 0.5))
    with pytest.raises(ValidationError):
        check_masks(np.zeros((2, 4, 4)), n=3)
    with pytest.raises(ValidationError):
        check_masks(np.zeros((1, 4, 4)), spatial=(8, 8))
    with pytest.raises(ValidationError):
        check_divisible((12, 16), 3)


def test_predict_rejects_other_sizes(xy):
    X, y = xy
    est = small().fit(X, y)
    with pytest.raises(ValueError):
        est.predict(np.zeros((1, 3, 8, 8)))
