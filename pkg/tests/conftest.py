import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from drebnet.schemas.model import ModelConfig
from drebnet.schemas.run import RunConfig
from drebnet.services.synthetic import write_synthetic_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model_config():
    """Narrow model on 32x32 inputs: stride-32 maps are 1x1, so training needs batches of two."""
    return ModelConfig(base_channels=4, input_hw=(32, 32), num_classes=2)


@pytest.fixture
def synthetic_index(tmp_path):
    index = write_synthetic_dataset(tmp_path / 'scenes', count=4, seed=3, hw=(32, 32), max_boxes=2)
    return index, tmp_path / 'scenes'


@pytest.fixture
def make_run_config(tmp_path, small_model_config):
    def build(**overrides):
        values = {
            'model': small_model_config,
            'optim': {'lr0': 1e-3, 'total_epochs': 2, 'batch_size': 2},
            'blur': {'psf_size': 9, 'max_jitter': 3.0},
            'output_dir': str(tmp_path / 'run'),
            'seed': 7,
        }
        values.update(overrides)
        return RunConfig.model_validate(values)

    return build
