import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mtl_vision import MultiTaskEstimator
from mtl_vision.augment import AugConfig
from mtl_vision.trainer import Prediction

SMALL = dict(width=0.125, num_protos=4, dec_layers=1, dec_heads=2, dec_dim=16, dec_ffn=32,
             max_caption_len=12, total_steps=2, batch_size=4, target_size=64, min_freq=1,
             conf_threshold=0.01, augment=AugConfig(mosaic_prob=0, mixup_prob=0, perspective_prob=0))


def test_params_round_trip():
    est = MultiTaskEstimator(**SMALL)
    params = est.get_params()
    assert params["width"] == 0.125 and params["seed"] == 0
    c = clone(est)
    assert c.get_params() == params and c is not est
    est.set_params(l_ie=1e-5, seed=3)
    assert (est.l_ie, est.seed) == (1e-5, 3)
    with pytest.raises(ValueError):
        est.set_params(learning_rate=1.0)


def test_unfitted_raises():
    est = MultiTaskEstimator(**SMALL)
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((32, 32, 3), np.uint8))


def test_fit_predict_score(scenes):
    est = MultiTaskEstimator(**SMALL).fit(scenes[:8])
    assert len(est.history_) == 2
    preds = est.predict([s.image for s in scenes[:2]] + [np.zeros((30, 50, 3), np.uint8)])
    assert len(preds) == 3 and all(isinstance(p, Prediction) for p in preds)
    assert preds[2].semantic.shape == (30, 50)
    assert 0.0 <= est.score(scenes[:4]) <= 1.0
    again = MultiTaskEstimator(**SMALL).fit(scenes[:8])
    assert again.history_ == est.history_


def test_fit_validates_input(scenes):
    with pytest.raises(ValueError):
        MultiTaskEstimator(**SMALL).fit([])
    with pytest.raises(TypeError):
        MultiTaskEstimator(**SMALL).fit([scenes[0].image])
