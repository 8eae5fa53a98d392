import numpy as np
import pytest

from drebnet.core.errors import ConfigError, DatasetError, NonFiniteError
from drebnet.engine.dump import load_tensor
from drebnet.engine.tape import no_grad
from drebnet.engine.tensor import Tensor
from drebnet.models.drebnet import Phase, forward_infer, forward_train
from drebnet.schemas.records import DatasetIndex, GroundTruthBox
from drebnet.schemas.run import AugmentConfig
from drebnet.services import training
from drebnet.services.checkpoint import load_checkpoint, restore_model
from drebnet.services.losses import LossParts
from drebnet.services.training import (
    EpochRecord,
    SampleSource,
    augment,
    color_jitter,
    hflip,
    make_batches,
    phase_for_epoch,
    train,
)


def _decoder_state(model):
    return {name: value.copy() for name, value in model.state_dict().items() if name.startswith('brab_deep.')}


def test_phase_switches_after_the_joint_epochs(make_run_config):
    cfg = make_run_config(optim={'total_epochs': 5, 'batch_size': 2}, phase_switch_ratio=0.6)
    assert cfg.switch_epoch == 3
    assert [phase_for_epoch(e, cfg) for e in range(1, 6)] == [Phase.JOINT] * 3 + [Phase.DETACHED_BRAB] * 2


def test_without_restoration_branch_every_epoch_is_detection_only(make_run_config, small_model_config):
    cfg = make_run_config(model=small_model_config.model_copy(update={'enable_brab': False, 'enable_magff': False}))
    assert phase_for_epoch(1, cfg) is Phase.DETACHED_BRAB


def test_batches_cover_every_image_and_fold_small_remainders():
    batches = make_batches(5, 2, np.random.default_rng(0), min_batch=2)
    assert [len(b) for b in batches] == [2, 3]
    assert sorted(i for b in batches for i in b) == list(range(5))
    assert [len(b) for b in make_batches(5, 2, np.random.default_rng(0))] == [2, 2, 1]


def test_hflip_mirrors_image_and_boxes():
    image = np.arange(2 * 4 * 32, dtype=np.float32).reshape(2, 4, 32)
    flipped, boxes = hflip(image, [GroundTruthBox(class_id=1, x_min=2, y_min=3, x_max=10, y_max=12)])
    np.testing.assert_array_equal(flipped[..., 0], image[..., -1])
    assert boxes[0].box == (22.0, 3.0, 30.0, 12.0)
    assert boxes[0].class_id == 1


def test_neutral_color_jitter_is_identity(rng):
    image = rng.uniform(size=(3, 5, 5)).astype(np.float32)
    np.testing.assert_allclose(color_jitter(image, 1.0, 1.0), image, atol=1e-6)
    assert color_jitter(image, 3.0, 2.0).max() <= 1.0


def test_augment_applies_identical_transform_to_every_image(rng):
    image = rng.uniform(size=(3, 8, 8)).astype(np.float32)
    boxes = [GroundTruthBox(class_id=0, x_min=0, y_min=0, x_max=4, y_max=4)]
    cfg = AugmentConfig(hflip_prob=1.0, color_jitter_strength=0.3)
    (a, b), out_boxes = augment((image, image.copy()), boxes, cfg, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    assert out_boxes[0].box == (4.0, 0.0, 8.0, 4.0)


def test_sharp_counterparts_replace_online_blur(make_run_config, synthetic_index):
    index, directory = synthetic_index
    cfg = make_run_config(data={'sharp_dir': str(directory)})
    sample = SampleSource(index, cfg, np.dtype(np.float32)).sample(0, epoch=1)
    np.testing.assert_array_equal(sample.blurred, sample.sharp)


def test_missing_sharp_counterpart_is_a_dataset_error(make_run_config, synthetic_index, tmp_path):
    index, _ = synthetic_index
    cfg = make_run_config(data={'sharp_dir': str(tmp_path / 'nowhere')})
    with pytest.raises(DatasetError):
        SampleSource(index, cfg, np.dtype(np.float32)).sample(0, epoch=1)


def test_online_blur_is_reproducible_per_epoch(make_run_config, synthetic_index):
    index, _ = synthetic_index
    cfg = make_run_config()
    first = SampleSource(index, cfg, np.dtype(np.float32)).sample(1, epoch=2)
    again = SampleSource(index, cfg, np.dtype(np.float32)).sample(1, epoch=2)
    other = SampleSource(index, cfg, np.dtype(np.float32)).sample(1, epoch=3)
    assert np.array_equal(first.blurred, again.blurred)
    assert first.seed != other.seed


def test_log_line_marks_absent_components():
    record = EpochRecord(epoch=4, phase=Phase.DETACHED_BRAB, lr=0.0005, steps=2,
                         losses={'hm': 1.5, 'wh': 2.0, 'off': 0.25, 'mse': None, 'ssim': None, 'total': 1.95})
    assert record.log_line(5) == ('Epoch 4/5 phase=detached_brab lr=0.000500 hm=1.5000 wh=2.0000 '
                                  'off=0.2500 mse=- ssim=- total=1.9500')


def test_two_phase_run_freezes_decoder_and_exports_inference_checkpoint(make_run_config, synthetic_index, rng):
    index, _ = synthetic_index
    cfg = make_run_config(optim={'total_epochs': 5, 'batch_size': 2}, phase_switch_ratio=0.6)
    snapshots = {}

    def snapshot(record, model):
        snapshots[record.epoch] = _decoder_state(model)

    result = train(cfg, index=index, on_epoch_end=snapshot)

    assert [r.phase for r in result.history] == [Phase.JOINT] * 3 + [Phase.DETACHED_BRAB] * 2
    assert all(r.losses['mse'] is not None for r in result.history[:3])
    assert all(r.losses['mse'] is None and r.losses['ssim'] is None for r in result.history[3:])
    assert all(np.isfinite(v) for v in result.step_losses)
    assert len(result.step_losses) == 10
    assert result.optim.step == 10
    assert any(not np.array_equal(snapshots[1][k], snapshots[3][k]) for k in snapshots[3])
    for name in snapshots[3]:
        assert np.array_equal(snapshots[3][name], snapshots[4][name])
        assert np.array_equal(snapshots[4][name], snapshots[5][name])

    train_ckpt = load_checkpoint(result.train_checkpoint)
    infer_ckpt = load_checkpoint(result.infer_checkpoint)
    assert train_ckpt.meta['epoch'] == 5
    assert not any(name.startswith('brab_deep.') for name in infer_ckpt.tensors)

    x = Tensor(rng.uniform(size=(1, 3, 32, 32)).astype(np.float32))
    trained = restore_model(train_ckpt).eval()
    deployed = restore_model(infer_ckpt).eval()
    with no_grad():
        det, _ = forward_train(x, trained, Phase.DETACHED_BRAB)
        infer = forward_infer(x, deployed)
    for a, b in ((det.hm, infer.hm), (det.wh, infer.wh), (det.reg, infer.reg)):
        assert np.max(np.abs(a.data - b.data)) == 0.0


def test_training_is_deterministic(make_run_config, synthetic_index):
    index, _ = synthetic_index
    cfg = make_run_config()
    first = train(cfg, index=index)
    first_bytes = first.train_checkpoint.read_bytes()
    second = train(cfg, index=index)
    assert second.train_checkpoint.read_bytes() == first_bytes
    assert first.step_losses == second.step_losses


def test_resume_continues_from_the_saved_epoch(make_run_config, synthetic_index, tmp_path):
    index, _ = synthetic_index
    first = train(make_run_config(output_dir=str(tmp_path / 'a')), index=index)
    cfg = make_run_config(optim={'lr0': 1e-3, 'total_epochs': 3, 'batch_size': 2}, output_dir=str(tmp_path / 'b'))
    resumed = train(cfg, index=index, resume=first.train_checkpoint)
    assert [r.epoch for r in resumed.history] == [3]
    assert resumed.optim.step == first.optim.step + 2
    assert load_checkpoint(resumed.train_checkpoint).meta['epoch'] == 3


def test_resume_rejects_inference_checkpoints_and_foreign_models(make_run_config, synthetic_index,
                                                                 small_model_config, tmp_path):
    index, _ = synthetic_index
    first = train(make_run_config(optim={'total_epochs': 1, 'batch_size': 2}, phase_switch_ratio=0.9), index=index)
    with pytest.raises(ConfigError):
        train(make_run_config(), index=index, resume=first.infer_checkpoint)
    other = make_run_config(model=small_model_config.model_copy(update={'enable_lfamm': False}))
    with pytest.raises(ConfigError):
        train(other, index=index, resume=first.train_checkpoint)


def test_attention_fusion_needs_batches_of_two(make_run_config, synthetic_index):
    index, _ = synthetic_index
    with pytest.raises(ConfigError):
        train(make_run_config(optim={'batch_size': 1}), index=index, save=False)


def test_single_image_batches_work_without_attention_fusion(make_run_config, synthetic_index, small_model_config):
    index, _ = synthetic_index
    model = small_model_config.model_copy(update={'enable_magff': False, 'input_hw': (64, 64)})
    cfg = make_run_config(model=model, optim={'total_epochs': 1, 'batch_size': 1}, phase_switch_ratio=0.9)
    result = train(cfg, index=DatasetIndex(records=index.records[:3]), save=False)
    assert result.history[0].steps == 3
    assert result.train_checkpoint is None


def test_empty_index_is_rejected(make_run_config):
    with pytest.raises(DatasetError):
        train(make_run_config(), index=DatasetIndex(records=[]))


def test_non_finite_loss_dumps_the_batch(make_run_config, synthetic_index, monkeypatch, tmp_path):
    index, _ = synthetic_index

    def poisoned(model, samples, phase, cfg):
        nan = Tensor(np.array(np.nan, dtype=np.float32))
        return nan, LossParts(hm=nan, wh=nan, off=nan)

    monkeypatch.setattr(training, 'compute_losses', poisoned)
    with pytest.raises(NonFiniteError, match='epoch 1 step 0'):
        train(make_run_config(), index=index)
    dumped = load_tensor(tmp_path / 'run' / 'nonfinite_epoch1_step0.drbt')
    assert dumped.shape == (2, 3, 32, 32)
