import numpy as np
import pytest

from drebnet.core.errors import CheckpointError
from drebnet.engine.optim import OptimState
from drebnet.engine.tape import no_grad
from drebnet.engine.tensor import Tensor
from drebnet.models.drebnet import Phase, build_model, forward_infer, forward_train
from drebnet.services.checkpoint import (
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    make_checkpoint,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)

CONFIG_OFFSET = 4 + 4 + 1 + 32 + 4


@pytest.fixture
def trained_model(make_run_config, rng):
    cfg = make_run_config()
    model = build_model(cfg.model, cfg.seed)
    with no_grad():
        # one training-mode pass moves the batch-norm running statistics off their init
        forward_train(Tensor(rng.uniform(size=(2, 3, 32, 32)).astype(np.float32)), model, Phase.JOINT)
    return cfg, model


def test_save_load_save_is_byte_identical(trained_model, tmp_path):
    cfg, model = trained_model
    ckpt = make_checkpoint(model, cfg, 'train', epoch=3)
    save_checkpoint(ckpt, tmp_path / 'a.drbc')
    loaded = load_checkpoint(tmp_path / 'a.drbc')
    save_checkpoint(loaded, tmp_path / 'b.drbc')
    assert (tmp_path / 'a.drbc').read_bytes() == (tmp_path / 'b.drbc').read_bytes()
    assert loaded.mode == 'train'
    assert loaded.meta == {'epoch': 3}
    assert loaded.config == cfg


def test_header_layout(trained_model):
    cfg, model = trained_model
    data = encode_checkpoint(make_checkpoint(model, cfg, 'infer'))
    assert data[:4] == b'DRBC'
    assert int.from_bytes(data[4:8], 'little') == 1
    assert data[8] == 1


def test_tampered_config_is_rejected(trained_model):
    cfg, model = trained_model
    data = bytearray(encode_checkpoint(make_checkpoint(model, cfg, 'train')))
    data[CONFIG_OFFSET + 2] ^= 0x01
    with pytest.raises(CheckpointError, match='digest'):
        decode_checkpoint(bytes(data))


@pytest.mark.parametrize('mangle,fragment', [
    (lambda d: b'XXXX' + d[4:], 'not a DRBC'),
    (lambda d: d[:4] + (7).to_bytes(4, 'little') + d[8:], 'version'),
    (lambda d: d[:8] + bytes([5]) + d[9:], 'mode'),
    (lambda d: d[:-3], 'truncated'),
    (lambda d: d + b'\x00', 'trailing'),
])
def test_corrupt_files_are_rejected(trained_model, mangle, fragment):
    cfg, model = trained_model
    data = encode_checkpoint(make_checkpoint(model, cfg, 'train'))
    with pytest.raises(CheckpointError, match=fragment):
        decode_checkpoint(mangle(data))


def test_inference_checkpoint_drops_the_decoder(trained_model, tmp_path):
    cfg, model = trained_model
    train_size = save_checkpoint(make_checkpoint(model, cfg, 'train'), tmp_path / 'train.drbc')
    infer_size = save_checkpoint(make_checkpoint(model, cfg, 'infer'), tmp_path / 'infer.drbc')
    assert infer_size < train_size
    infer = load_checkpoint(tmp_path / 'infer.drbc')
    assert infer.mode == 'infer'
    assert not any(name.startswith('brab_deep.') for name in infer.tensors)
    assert any(name.startswith('brab_shallow.') for name in infer.tensors)


def test_inference_checkpoint_with_decoder_tensors_cannot_be_written(trained_model):
    cfg, model = trained_model
    ckpt = make_checkpoint(model, cfg, 'infer')
    ckpt.tensors['brab_deep.sneaky'] = np.zeros(2, dtype=np.float32)
    with pytest.raises(CheckpointError):
        encode_checkpoint(ckpt)


@pytest.mark.parametrize('mode', ['train', 'infer'])
def test_restored_model_reproduces_inference_outputs(trained_model, rng, tmp_path, mode):
    cfg, model = trained_model
    save_checkpoint(make_checkpoint(model, cfg, mode), tmp_path / 'm.drbc')
    restored = restore_model(load_checkpoint(tmp_path / 'm.drbc'))
    assert restored.training == (mode == 'train')
    x = Tensor(rng.uniform(size=(1, 3, 32, 32)).astype(np.float32))
    with no_grad():
        expected = forward_infer(x, model.eval())
        actual = forward_infer(x, restored.eval())
    for a, b in ((expected.hm, actual.hm), (expected.wh, actual.wh), (expected.reg, actual.reg)):
        assert np.max(np.abs(a.data - b.data)) == 0.0


def test_training_checkpoint_must_hold_every_tensor(trained_model):
    cfg, model = trained_model
    ckpt = make_checkpoint(model, cfg, 'train')
    del ckpt.tensors[sorted(ckpt.tensors)[0]]
    with pytest.raises(CheckpointError):
        restore_model(ckpt)


def test_optimizer_state_survives_a_round_trip(trained_model, tmp_path):
    cfg, model = trained_model
    names = sorted(model.parameters())[:3]
    state = OptimState(learning_rate=1e-3, total_steps=10, step=4)
    for i, name in enumerate(names):
        shape = model.state_dict()[name].shape
        state.first_moment[name] = np.full(shape, 0.5 + i, dtype=np.float32)
        state.second_moment[name] = np.full(shape, 0.25, dtype=np.float32)
    save_checkpoint(make_checkpoint(model, cfg, 'train', optim=state, epoch=2), tmp_path / 't.drbc')
    ckpt = load_checkpoint(tmp_path / 't.drbc')
    assert ckpt.meta == {'epoch': 2, 'step': 4, 'rule': 'adam'}
    assert set(ckpt.model_state()) == set(model.state_dict())

    fresh = restore_optimizer(ckpt, OptimState(learning_rate=1e-3, total_steps=10))
    assert fresh.step == 4
    assert set(fresh.first_moment) == set(names)
    for name in names:
        np.testing.assert_array_equal(fresh.first_moment[name], state.first_moment[name])
        np.testing.assert_array_equal(fresh.second_moment[name], state.second_moment[name])


def test_inference_checkpoint_has_no_optimizer_state(trained_model):
    cfg, model = trained_model
    with pytest.raises(CheckpointError):
        restore_optimizer(make_checkpoint(model, cfg, 'infer'), OptimState(learning_rate=1e-3))


def test_missing_checkpoint_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / 'absent.drbc')
