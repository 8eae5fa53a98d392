import numpy as np
import pytest

from drebnet.core.errors import InvariantViolation, MissingGradientError, ShapeMismatchError, TapeError
from drebnet.engine import functional as F
from drebnet.engine.dump import decode_tensor, dump_tensor, encode_tensor, load_tensor
from drebnet.engine.gradcheck import grad_check
from drebnet.engine.module import BatchNorm2d
from drebnet.engine.optim import OptimState, optimizer_step
from drebnet.engine.rng import derive_seed, stream
from drebnet.engine.tape import backward, count_costs, no_grad
from drebnet.engine.tensor import Tensor, default_dtype, parameter


def _conv_loop(x, w, b, stride, padding):
    n, c, h, width = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (width + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out))
    for i in range(h_out):
        for j in range(w_out):
            patch = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, :, i, j] = np.einsum('nckl,ockl->no', patch, w) + b
    return out


@pytest.mark.parametrize('stride,padding', [(1, 1), (2, 1), (1, 0), (2, 0)])
def test_conv2d_matches_loop_oracle(rng, stride, padding):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = F.conv2d(Tensor(x, dtype='f64'), Tensor(w, dtype='f64'), Tensor(b, dtype='f64'),
                   stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, _conv_loop(x, w, b, stride, padding), atol=1e-12)


def test_conv_transpose_is_adjoint_of_conv(rng):
    weight = rng.standard_normal((3, 5, 4, 4))
    x = rng.standard_normal((2, 5, 8, 8))
    y = rng.standard_normal((2, 3, 4, 4))
    forward = F.conv2d(Tensor(x, dtype='f64'), Tensor(weight, dtype='f64'), stride=2, padding=1).data
    adjoint = F.conv_transpose2d(Tensor(y, dtype='f64'), Tensor(weight, dtype='f64'), stride=2, padding=1).data
    assert adjoint.shape == x.shape
    assert np.sum(forward * y) == pytest.approx(np.sum(x * adjoint), rel=1e-12)


def test_conv2d_rejects_channel_mismatch(rng):
    with pytest.raises(ShapeMismatchError):
        F.conv2d(Tensor(rng.standard_normal((1, 2, 4, 4))), Tensor(rng.standard_normal((3, 4, 3, 3))))


def test_batch_norm_train_mode_moments_and_running_stats(rng):
    bn = BatchNorm2d(3, dtype='f64')
    x = rng.standard_normal((4, 3, 5, 5)) * 3.0 + 2.0
    out = bn(Tensor(x, dtype='f64')).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
    count = 4 * 5 * 5
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * count / (count - 1), rtol=1e-12)


def test_batch_norm_eval_mode_uses_running_stats(rng):
    bn = BatchNorm2d(2, dtype='f64').eval()
    bn.running_mean[...] = [1.0, -1.0]
    bn.running_var[...] = [4.0, 0.25]
    x = rng.standard_normal((1, 2, 3, 3))
    out = bn(Tensor(x, dtype='f64')).data
    expected = (x - np.array([1.0, -1.0])[None, :, None, None]) / np.sqrt(
        np.array([4.0, 0.25]) + 1e-5)[None, :, None, None]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_batch_norm_needs_two_values_per_channel():
    bn = BatchNorm2d(2)
    with pytest.raises(InvariantViolation):
        bn(Tensor(np.ones((1, 2, 1, 1))))


def test_backward_accumulates_shared_inputs():
    x = parameter(np.array([3.0]), dtype='f64')
    loss = F.add(F.mul(x, x), x)
    backward(loss)
    assert x.grad[0] == pytest.approx(7.0)


def test_second_backward_on_same_tape_is_rejected():
    x = parameter(np.array([1.0, 2.0]), dtype='f64')
    loss = F.sum(F.mul(x, x))
    backward(loss)
    with pytest.raises(TapeError):
        backward(loss)


def test_backward_needs_scalar():
    x = parameter(np.ones(3))
    with pytest.raises(TapeError):
        backward(F.mul(x, 2.0))


def test_no_grad_records_nothing():
    x = parameter(np.ones(2))
    with no_grad():
        y = F.mul(x, 3.0)
    assert y.node is None


def test_cost_meter_counts_conv_macs_and_bias_adds(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    b = Tensor(np.zeros(3))
    with no_grad(), count_costs() as meter:
        F.conv2d(x, w, b, padding=1)
        F.relu(x)
    assert meter.macs == 3 * 4 * 4 * 2 * 3 * 3
    assert meter.flops == meter.macs + 3 * 4 * 4


def test_default_dtype_switch():
    with default_dtype('f64'):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_adam_first_step_moves_by_learning_rate():
    p = parameter(np.array([1.0, -2.0]), dtype='f64')
    p.grad = np.array([0.5, -3.0])
    state = OptimState(learning_rate=0.1, schedule='constant')
    lr = optimizer_step({'p': p}, state)
    assert lr == 0.1
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)
    assert p.grad is None
    assert state.step == 1


def test_linear_schedule_decays_to_zero():
    state = OptimState(learning_rate=1.0, schedule='linear', total_steps=4)
    assert [state.effective_lr(t) for t in range(5)] == [1.0, 0.75, 0.5, 0.25, 0.0]


def test_optimizer_requires_gradients():
    with pytest.raises(MissingGradientError):
        optimizer_step({'p': parameter(np.ones(2))}, OptimState(learning_rate=0.1))


def test_sgd_rule(rng):
    p = parameter(np.zeros(3), dtype='f64')
    grad = rng.standard_normal(3)
    p.grad = grad.copy()
    optimizer_step({'p': p}, OptimState(learning_rate=0.5, schedule='constant', rule='sgd'))
    np.testing.assert_allclose(p.data, -0.5 * grad)


def test_grad_check_on_composite_expression(rng):
    with default_dtype('f64'):
        params = {'a': parameter(rng.standard_normal((3, 4))), 'b': parameter(rng.standard_normal(4))}
        error = grad_check(lambda p: F.sum(F.mul(F.sigmoid(F.add(p['a'], p['b'])), p['a'])), params)
    assert error < 1e-6


def test_grad_check_demands_f64():
    with pytest.raises(InvariantViolation):
        grad_check(lambda p: F.sum(p['a']), {'a': parameter(np.ones(2, dtype=np.float32))})


def test_tensor_dump_round_trip(tmp_path, rng):
    array = rng.standard_normal((2, 3, 4)).astype(np.float32)
    dump_tensor(array, tmp_path / 'x.drbt')
    np.testing.assert_array_equal(load_tensor(tmp_path / 'x.drbt').data, array)
    blob = encode_tensor(array.astype(np.float64))
    assert blob[:4] == b'DRBT'
    assert decode_tensor(blob).dtype == np.float64


def test_named_streams_are_reproducible_and_independent():
    a = stream(5, 'init', 'det').uniform(size=4)
    assert np.array_equal(a, stream(5, 'init', 'det').uniform(size=4))
    assert not np.array_equal(a, stream(5, 'init', 'brab').uniform(size=4))
    assert derive_seed(5, 'blur', 1, 2) == derive_seed(5, 'blur', 1, 2)
    assert derive_seed(5, 'blur', 1, 2) != derive_seed(5, 'blur', 2, 1)
