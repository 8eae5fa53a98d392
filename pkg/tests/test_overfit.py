import numpy as np
import pytest

from drebnet.engine.tape import no_grad
from drebnet.engine.tensor import Tensor
from drebnet.models.drebnet import Phase, forward_train
from drebnet.schemas.model import ModelConfig
from drebnet.schemas.records import TrajectoryParams
from drebnet.schemas.run import RunConfig
from drebnet.services.blur import make_blur_pair, psnr
from drebnet.services.dataset import load_dataset, read_image, write_image
from drebnet.services.evaluation import compute_report, run_detector
from drebnet.services.synthetic import write_synthetic_dataset
from drebnet.services.training import train


@pytest.fixture
def blurred_scenes(tmp_path):
    """Eight two-class scenes, each with one fixed seeded blur."""
    sharp_dir, blurred_dir = tmp_path / 'sharp', tmp_path / 'blurred'
    write_synthetic_dataset(sharp_dir, count=8, seed=11, hw=(64, 64), num_classes=2, max_boxes=3)
    blurred_dir.mkdir()
    params = TrajectoryParams(max_jitter=3.0)
    for i, path in enumerate(sorted(sharp_dir.glob('*.ppm'))):
        write_image(make_blur_pair(read_image(path), seed=500 + i, params=params, k_psf=9).blurred,
                    blurred_dir / path.name)
    return load_dataset(sharp_dir / 'index.txt', blurred_dir), sharp_dir, blurred_dir


@pytest.mark.slow
def test_tiny_set_is_memorised(tmp_path, blurred_scenes):
    index, sharp_dir, blurred_dir = blurred_scenes
    cfg = RunConfig.model_validate({
        'model': ModelConfig(base_channels=16, input_hw=(64, 64), num_classes=2),
        'optim': {'lr0': 2e-3, 'total_epochs': 320, 'batch_size': 8},
        'phase_switch_ratio': 0.9,
        'data': {'sharp_dir': str(sharp_dir)},
        'augment': {'hflip_prob': 0.0, 'color_jitter_strength': 0.0},
        'output_dir': str(tmp_path / 'run'),
        'seed': 5,
    })
    names = [p.name for p in sorted(blurred_dir.glob('*.ppm'))]
    blurred = np.stack([read_image(blurred_dir / n) for n in names])
    sharp = np.stack([read_image(sharp_dir / n) for n in names])
    gains = []

    def restoration_gain(record, model):
        if record.epoch != cfg.switch_epoch:
            return
        model.eval()
        with no_grad():
            _, brab = forward_train(Tensor(blurred.astype(model.dtype)), model, Phase.JOINT)
        model.train()
        restored = brab.restored.data
        gains.append(np.mean([psnr(restored[i], sharp[i]) - psnr(blurred[i], sharp[i])
                              for i in range(len(names))]))

    result = train(cfg, index=index, on_epoch_end=restoration_gain, save=False)
    assert len(result.step_losses) <= 2000
    assert gains and gains[0] >= 2.0

    dets = run_detector(result.model, index, score_thresh=0.1)
    report = dict(compute_report(dets, index.ground_truth(), [0.5], num_classes=2))
    assert report['mAP_50'] >= 0.95
