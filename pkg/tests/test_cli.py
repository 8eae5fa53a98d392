import logging

import numpy as np
import pytest

from drebnet.cli import main
from drebnet.engine.dump import load_tensor
from drebnet.schemas.run import format_run_config
from drebnet.services.dataset import write_image


@pytest.fixture(autouse=True)
def _restore_logging():
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def config_file(make_run_config, synthetic_index, tmp_path):
    _, directory = synthetic_index
    cfg = make_run_config(optim={'total_epochs': 1, 'batch_size': 2}, phase_switch_ratio=0.9,
                          data={'train_index': str(directory / 'index.txt'), 'image_dir': str(directory)})
    path = tmp_path / 'run.cfg'
    path.write_text(format_run_config(cfg), encoding='utf-8')
    return path


@pytest.fixture
def trained(config_file, tmp_path, capsys):
    assert main(['train', '--config', str(config_file)]) == 0
    capsys.readouterr()
    return tmp_path / 'run'


def test_version_exits_cleanly(capsys):
    with pytest.raises(SystemExit) as exc:
        main(['--version'])
    assert exc.value.code == 0
    assert 'drebnet' in capsys.readouterr().out


def test_usage_errors_exit_with_one(tmp_path, capsys):
    assert main(['train', '--config', str(tmp_path / 'missing.cfg')]) == 1
    assert main(['detect', '--bogus']) == 1
    assert main([]) == 1
    assert 'error' in capsys.readouterr().err


def test_gradcheck_reports_pass(capsys):
    assert main(['gradcheck', '--module', 'lfamm']) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1].startswith('PASS')


def test_train_writes_both_checkpoints(trained):
    assert (trained / 'train.drbc').is_file()
    assert (trained / 'infer.drbc').is_file()


def test_detect_on_blank_image_with_high_threshold(trained, tmp_path, capsys):
    write_image(np.zeros((3, 32, 32)), tmp_path / 'blank.png')
    heatmap = tmp_path / 'hm.drbt'
    code = main(['detect', '--ckpt', str(trained / 'infer.drbc'), '--image', str(tmp_path / 'blank.png'),
                 '--thresh', '1.0', '--dump-heatmap', str(heatmap)])
    assert code == 0
    assert capsys.readouterr().out.splitlines()[0] == '0 detections'
    assert load_tensor(heatmap).shape == (1, 2, 8, 8)


def test_detect_refuses_training_checkpoint(trained, synthetic_index, capsys):
    _, directory = synthetic_index
    args = ['detect', '--ckpt', str(trained / 'train.drbc'), '--image', str(directory / 'scene_0000.ppm')]
    assert main(args) == 1
    assert main(args + ['--allow-train']) == 0


def test_eval_prints_metric_table(trained, synthetic_index, tmp_path, capsys):
    _, directory = synthetic_index
    code = main(['eval', '--ckpt', str(trained / 'infer.drbc'), '--data', str(directory / 'index.txt'),
                 '--iou', '0.5,0.75', '--out', str(tmp_path / 'eval')])
    assert code == 0
    metrics = [line.split()[0] for line in capsys.readouterr().out.splitlines()]
    assert 'mAP_50' in metrics and 'mAP_75' in metrics
    assert (tmp_path / 'eval' / 'metrics.csv').is_file()


def test_eval_rejects_bad_thresholds(trained, synthetic_index):
    _, directory = synthetic_index
    assert main(['eval', '--ckpt', str(trained / 'infer.drbc'), '--data', str(directory / 'index.txt'),
                 '--iou', '1.5']) == 1


def test_flops_reports_both_graphs(config_file, capsys):
    assert main(['flops', '--config', str(config_file)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith('train') and lines[1].startswith('infer')


def test_synth_blur_writes_one_file_per_image(tmp_path, rng, capsys):
    source = tmp_path / 'sharp'
    source.mkdir()
    for name in ('a.png', 'b.ppm'):
        write_image(rng.uniform(size=(3, 24, 24)), source / name)
    (source / 'notes.txt').write_text('skip me', encoding='utf-8')
    code = main(['synth-blur', '--in', str(source), '--out', str(tmp_path / 'blurred'), '--psf-size', '9',
                 '--max-jitter', '4', '--seed', '2'])
    assert code == 0
    assert sorted(p.name for p in (tmp_path / 'blurred').iterdir()) == ['a.png', 'b.ppm']
    assert 'blurred 2 image(s)' in capsys.readouterr().out


def test_stats_over_pairs(tmp_path, rng, capsys):
    for sub in ('sharp', 'blurred'):
        (tmp_path / 'pairs' / sub).mkdir(parents=True)
    image = rng.uniform(size=(3, 16, 16))
    write_image(image, tmp_path / 'pairs' / 'sharp' / 'x.png')
    write_image(image, tmp_path / 'pairs' / 'blurred' / 'x.png')
    assert main(['stats', '--pairs', str(tmp_path / 'pairs'), '--out', str(tmp_path / 'stats.csv')]) == 0
    assert capsys.readouterr().out.splitlines()[1].split()[:2] == ['inf', '1']
    assert (tmp_path / 'stats.csv').read_text(encoding='utf-8').startswith('psnr_bin,count,mean_ssim')


def test_stats_needs_matching_blurred_file(tmp_path, rng):
    (tmp_path / 'pairs' / 'sharp').mkdir(parents=True)
    (tmp_path / 'pairs' / 'blurred').mkdir()
    write_image(rng.uniform(size=(3, 16, 16)), tmp_path / 'pairs' / 'sharp' / 'x.png')
    assert main(['stats', '--pairs', str(tmp_path / 'pairs')]) == 1


def test_synth_scenes_renders_an_index(tmp_path):
    assert main(['synth-scenes', '--out', str(tmp_path / 'scenes'), '--count', '3', '--size', '32']) == 0
    assert len(list((tmp_path / 'scenes').glob('*.ppm'))) == 3
    assert (tmp_path / 'scenes' / 'index.txt').is_file()


def test_synth_blur_rejects_even_psf_size(tmp_path, capsys):
    (tmp_path / 'sharp').mkdir()
    code = main(['synth-blur', '--in', str(tmp_path / 'sharp'), '--out', str(tmp_path / 'blurred'),
                 '--psf-size', '8'])
    assert code == 1
    assert 'odd' in capsys.readouterr().err
    assert not (tmp_path / 'blurred').exists()


def test_unreadable_image_is_a_runtime_failure(tmp_path, capsys):
    source = tmp_path / 'sharp'
    source.mkdir()
    (source / 'broken.png').write_bytes(b'not an image at all')
    assert main(['synth-blur', '--in', str(source), '--out', str(tmp_path / 'blurred')]) == 2
    assert 'synth-blur failed' in capsys.readouterr().err
