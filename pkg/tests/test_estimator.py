import numpy as np
import pytest
from sklearn.base import clone

from protoformer import ProtoFormerSegmenter
from protoformer.data import sample_episode, split_folds
from protoformer.exceptions import ContractError, DimensionError, NotFittedError
from protoformer.rng import SplitMix64
from protoformer.validation import check_image, check_mask, check_support


@pytest.fixture(scope="module")
def fitted(small_dataset):
    return ProtoFormerSegmenter(dim=8, steps=4, batch=1, image_size=32, seed=2).fit(small_dataset)


def test_params_round_trip():
    seg = ProtoFormerSegmenter(dim=32, decoder_layers=2)
    params = seg.get_params()
    assert params["dim"] == 32 and params["decoder_layers"] == 2
    twin = clone(seg)
    assert twin.get_params() == params and twin is not seg
    assert seg.set_params(lr=5e-4).lr == 5e-4


def test_unfitted_raises():
    seg = ProtoFormerSegmenter()
    with pytest.raises(NotFittedError, match="fit"):
        seg.predict([])
    with pytest.raises(NotFittedError):
        seg.save("/tmp/never")


def test_bad_config_surfaces_at_fit(small_dataset):
    with pytest.raises(Exception, match="divisible"):
        ProtoFormerSegmenter(dim=6, n_heads=4).fit(small_dataset)


def test_fit_attributes(fitted, small_dataset):
    assert len(fitted.loss_curve_) == 4
    assert fitted.n_classes_ == small_dataset.num_classes
    assert fitted.split_.test_classes == frozenset({0})


def test_predict_shapes(fitted, small_dataset):
    split = split_folds(small_dataset.num_classes, 4, 0)
    rng = SplitMix64(0)
    eps = [sample_episode(split, small_dataset, 1, rng, train=False) for _ in range(3)]
    masks = fitted.predict(eps)
    assert len(masks) == 3 and masks[0].shape == (32, 32) and masks[0].dtype == np.uint8
    proba = fitted.predict_proba(eps[0])
    assert proba.shape == (32, 32) and np.all((proba >= 0) & (proba <= 1))
    np.testing.assert_array_equal(fitted.predict(eps[0]), (proba > 0.5).astype(np.uint8))


def test_segment_raw_arrays(fitted, small_dataset):
    image, labels = small_dataset.load(0)
    mask = (labels[0] == 1).astype(np.uint8)
    out = fitted.segment(image.transpose(1, 2, 0), [image], [mask])
    assert out.shape == (32, 32)
    with pytest.raises(ValueError):
        fitted.segment(np.zeros((3, 16, 16)), [image], [mask])


def test_score_in_unit_interval(fitted, small_dataset):
    assert 0.0 <= fitted.score(small_dataset, episodes=4) <= 1.0


def test_save_load(fitted, small_dataset, tmp_path):
    fitted.save(tmp_path / "seg")
    again = ProtoFormerSegmenter.load(tmp_path / "seg")
    assert again.get_params() == fitted.get_params()
    split = split_folds(small_dataset.num_classes, 4, 0)
    ep = sample_episode(split, small_dataset, 1, SplitMix64(4), train=False)
    np.testing.assert_array_equal(again.predict_proba(ep), fitted.predict_proba(ep))


class TestValidation:
    def test_image_layouts(self):
        assert check_image(np.zeros((8, 16, 3))).shape == (3, 8, 16)
        assert check_image(np.zeros((3, 8, 8))).dtype == np.float32

    @pytest.mark.parametrize("shape", [(3, 10, 8), (4, 8, 8), (8, 8)])
    def test_image_rejects(self, shape):
        with pytest.raises(DimensionError):
            check_image(np.zeros(shape))

    def test_image_nan(self):
        img = np.zeros((3, 8, 8))
        img[0, 0, 0] = np.nan
        with pytest.raises(ContractError, match="non-finite"):
            check_image(img)

    def test_mask(self):
        assert check_mask(np.eye(8)).shape == (1, 8, 8)
        with pytest.raises(ContractError):
            check_mask(np.full((8, 8), 0.5))
        with pytest.raises(DimensionError):
            check_mask(np.eye(8), (16, 16))

    def test_support(self):
        with pytest.raises(ContractError):
            check_support([], [])
        with pytest.raises(ContractError):
            check_support([np.zeros((3, 8, 8))], [])
        with pytest.raises(DimensionError):
            check_support([np.zeros((3, 8, 8)), np.zeros((3, 16, 16))], [np.eye(8), np.eye(16)])
