import math

import numpy as np
import pytest

from drebnet.core.errors import InvariantViolation, ShapeMismatchError
from drebnet.engine.tape import backward
from drebnet.engine.tensor import Tensor, parameter
from drebnet.models.drebnet import Phase
from drebnet.schemas.run import LossWeights
from drebnet.services.losses import (
    LossParts,
    focal_loss,
    gaussian_window,
    mse_loss,
    offset_loss,
    ssim_index,
    ssim_loss,
    total_loss,
    wh_loss,
)
from drebnet.schemas.records import GroundTruthBox
from drebnet.services.selfcheck import run_gradcheck
from drebnet.services.targets import encode_targets, stack_targets


def test_focal_loss_hand_value():
    target = np.array([[[[1.0, 0.0]]]])
    pred = Tensor(np.full((1, 1, 1, 2), 0.5), dtype='f64')
    assert focal_loss(pred, target).item() == pytest.approx(0.5 * math.log(2.0), rel=1e-9)


def test_focal_loss_vanishes_for_perfect_prediction():
    target = np.zeros((1, 2, 6, 6))
    target[0, 1, 2, 3] = 1.0
    assert focal_loss(Tensor(target.copy(), dtype='f64'), target).item() < 1e-10


def test_focal_loss_down_weights_negatives_near_peaks():
    far = np.zeros((1, 1, 1, 2))
    far[0, 0, 0, 0] = 1.0
    near = far.copy()
    near[0, 0, 0, 1] = 0.9
    pred = Tensor(np.array([[[[0.9, 0.6]]]]), dtype='f64')
    assert focal_loss(pred, near).item() < focal_loss(pred, far).item()


def test_focal_loss_checks_shapes():
    with pytest.raises(ShapeMismatchError):
        focal_loss(Tensor(np.zeros((1, 2, 4, 4))), np.zeros((1, 1, 4, 4)))


def test_focal_loss_cell_mask_only_counts_the_box_class():
    box = GroundTruthBox(class_id=0, x_min=10, y_min=12, x_max=30, y_max=28)
    maps = stack_targets([encode_targets([box], num_classes=2, input_hw=(64, 64), dtype=np.float64)])
    pred = Tensor(np.clip(maps.hm_t, 1e-7, 1.0 - 1e-7), dtype='f64')
    unmasked = focal_loss(pred, maps.hm_t).item()
    masked = focal_loss(pred, maps.hm_t, maps.pos_mask).item()
    assert unmasked < 0.1
    assert masked == pytest.approx(unmasked, abs=1e-12)


def test_focal_loss_normalises_by_class_positives_with_cell_mask():
    target = np.zeros((1, 2, 4, 4))
    target[0, 0, 1, 1] = 1.0
    cells = np.zeros((1, 4, 4), dtype=bool)
    cells[0, 1, 1] = True
    pred = Tensor(np.full((1, 2, 4, 4), 0.5), dtype='f64')
    neg = 31 * 0.25 * math.log(2.0)
    expected = 0.25 * math.log(2.0) + neg
    assert focal_loss(pred, target, cells).item() == pytest.approx(expected, rel=1e-12)
    assert focal_loss(pred, target, cells).item() == pytest.approx(focal_loss(pred, target).item(), rel=1e-12)


def test_focal_loss_accepts_per_class_mask_and_rejects_odd_shapes():
    target = np.zeros((1, 2, 4, 4))
    target[0, 1, 2, 2] = 1.0
    pred = Tensor(np.full((1, 2, 4, 4), 0.5), dtype='f64')
    assert focal_loss(pred, target, target == 1.0).item() == pytest.approx(focal_loss(pred, target).item())
    with pytest.raises(ShapeMismatchError):
        focal_loss(pred, target, np.ones((3, 3), dtype=bool))


def test_size_and_offset_losses_only_see_positive_cells():
    pred = np.zeros((1, 2, 2, 2))
    target = np.full((1, 2, 2, 2), 5.0)
    target[0, :, 0, 1] = (3.0, 1.0)
    mask = np.zeros((1, 2, 2), dtype=bool)
    mask[0, 0, 1] = True
    assert wh_loss(Tensor(pred, dtype='f64'), target, mask).item() == pytest.approx(4.0)
    assert offset_loss(Tensor(pred, dtype='f64'), target, mask).item() == pytest.approx(4.0)


def test_masked_losses_are_zero_without_positives():
    mask = np.zeros((1, 2, 2), dtype=bool)
    assert wh_loss(Tensor(np.ones((1, 2, 2, 2))), np.zeros((1, 2, 2, 2)), mask).item() == 0.0


def test_mse_loss_value(rng):
    a = rng.uniform(size=(1, 3, 4, 4))
    b = rng.uniform(size=(1, 3, 4, 4))
    assert mse_loss(Tensor(a, dtype='f64'), b).item() == pytest.approx(np.mean((a - b) ** 2), rel=1e-12)
    with pytest.raises(ShapeMismatchError):
        mse_loss(Tensor(a, dtype='f64'), b[:, :2])


def test_gaussian_window_is_normalised():
    window = gaussian_window()
    assert window.shape == (11, 11)
    assert window.sum() == pytest.approx(1.0, abs=1e-12)


def test_ssim_of_identical_images_is_one(rng):
    x = rng.uniform(size=(3, 20, 24))
    assert abs(ssim_index(x, x) - 1.0) < 1e-12


def test_ssim_is_symmetric(rng):
    a = rng.uniform(size=(3, 16, 16))
    b = rng.uniform(size=(3, 16, 16))
    assert abs(ssim_index(a, b) - ssim_index(b, a)) < 1e-12


def test_ssim_loss_is_bounded(rng):
    for _ in range(100):
        a = rng.uniform(size=(1, 2, 16, 16))
        b = rng.uniform(size=(1, 2, 16, 16))
        value = ssim_loss(Tensor(a, dtype='f64'), b).item()
        assert 0.0 <= value <= 2.0


def test_ssim_rejects_images_smaller_than_window():
    with pytest.raises(ShapeMismatchError):
        ssim_index(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))


def test_ssim_loss_backpropagates(rng):
    restored = parameter(rng.uniform(size=(1, 1, 12, 12)), dtype='f64')
    backward(ssim_loss(restored, rng.uniform(size=(1, 1, 12, 12))))
    assert restored.grad is not None
    assert np.any(restored.grad != 0.0)


def test_total_loss_weights_components():
    weights = LossWeights()
    parts = LossParts(hm=1.0, wh=2.0, off=3.0, mse=4.0, ssim=5.0)
    assert total_loss(parts, weights, Phase.JOINT).item() == pytest.approx(1.0 + 0.2 + 3.0 + 4.0 + 2.5)
    assert total_loss(parts, weights, Phase.DETACHED_BRAB).item() == pytest.approx(4.2)


def test_joint_total_loss_needs_restoration_parts():
    with pytest.raises(InvariantViolation):
        total_loss(LossParts(hm=1.0, wh=1.0, off=1.0), LossWeights(), Phase.JOINT)


def test_loss_parts_report_missing_components_as_none():
    parts = LossParts(hm=Tensor(np.array(0.5)), wh=1.0, off=2.0)
    assert parts.as_dict() == {'hm': 0.5, 'wh': 1.0, 'off': 2.0, 'mse': None, 'ssim': None}


def test_loss_gradients_match_finite_differences():
    results = run_gradcheck('losses', seed=1)
    assert all(r.passed for r in results), [(r.name, r.error) for r in results]
