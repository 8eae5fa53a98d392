"""Run configuration tree and its flat ``key = value`` file form."""
from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from drebnet.core.errors import ConfigError
from drebnet.schemas.model import ModelConfig


class LossWeights(BaseModel):
    model_config = ConfigDict(extra='forbid')

    w_hm: float = Field(default=1.0, ge=0)
    w_wh: float = Field(default=0.1, ge=0)
    w_off: float = Field(default=1.0, ge=0)
    w_mse: float = Field(default=1.0, ge=0)
    w_ssim: float = Field(default=0.5, ge=0)
    gamma: float = Field(default=2.0, ge=0)
    beta: float = Field(default=4.0, ge=0)


class OptimConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    lr0: float = Field(default=1e-3, ge=0)
    total_epochs: int = Field(default=40, ge=1)
    batch_size: int = Field(default=16, ge=1)
    rule: Literal['adam', 'sgd'] = 'adam'
    schedule: Literal['linear', 'constant'] = 'linear'


class DataConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    train_index: str = ''
    val_index: str = ''
    image_dir: str = '.'
    # sharp counterparts of already blurred frames, matched by file name
    sharp_dir: str = ''
    class_map: dict[int, int] | None = None
    frame_stride: int = Field(default=1, ge=1)

    @field_validator('class_map', mode='before')
    @classmethod
    def parse_class_map(cls, value: Any) -> Any:
        if not isinstance(value, str):
            return value
        if not value.strip():
            return None
        mapping = {}
        for pair in value.split(','):
            source, _, target = pair.partition(':')
            if not target:
                raise ValueError(f'class_map entries look like source:target, got {pair!r}')
            mapping[int(source)] = int(target)
        return mapping


class AugmentConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    hflip_prob: float = Field(default=0.5, ge=0, le=1)
    color_jitter_strength: float = Field(default=0.2, ge=0, lt=1)


class DetectConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    min_overlap: float = Field(default=0.7, gt=0, lt=1)
    k_max: int = Field(default=100, ge=1)
    score_thresh: float = Field(default=0.1, ge=0, le=1)


class BlurConfig(BaseModel):
    """Online blur applied to sharp training images; disabled when the index already lists blurred frames."""

    model_config = ConfigDict(extra='forbid')

    enabled: bool = True
    psf_size: int = Field(default=17, ge=1)
    length_steps: int = Field(default=64, ge=2)
    max_jitter: float = Field(default=10.0, ge=0)
    anxiety: float = Field(default=0.005, ge=0)

    @field_validator('psf_size')
    @classmethod
    def check_odd(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f'psf_size must be odd, got {value}')
        return value


class RunConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    phase_switch_ratio: float = Field(default=0.5, gt=0, lt=1)
    data: DataConfig = Field(default_factory=DataConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    detect: DetectConfig = Field(default_factory=DetectConfig)
    blur: BlurConfig = Field(default_factory=BlurConfig)
    seed: int = 0
    output_dir: str = 'runs'

    @field_validator('model', mode='before')
    @classmethod
    def parse_input_hw(cls, value: Any) -> Any:
        if isinstance(value, dict) and isinstance(value.get('input_hw'), str):
            text = value['input_hw'].lower().replace('x', ',')
            value = {**value, 'input_hw': tuple(int(part) for part in text.split(','))}
        return value

    @model_validator(mode='after')
    def check_switch(self) -> 'RunConfig':
        if self.switch_epoch < 1:
            raise ValueError(
                f'phase_switch_ratio {self.phase_switch_ratio} leaves no joint epoch '
                f'out of {self.optim.total_epochs}')
        return self

    @property
    def switch_epoch(self) -> int:
        """Last epoch (1-based) trained in the joint phase."""
        return int(round(self.phase_switch_ratio * self.optim.total_epochs))


def unflatten(flat: dict[str, Any]) -> dict[str, Any]:
    tree: dict[str, Any] = {}
    for dotted, value in flat.items():
        node = tree
        *parents, leaf = dotted.split('.')
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f'config key {dotted!r} nests under a scalar value')
            node = child
        node[leaf] = value
    return tree


def flatten(tree: dict[str, Any], prefix: str = '') -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in tree.items():
        name = f'{prefix}{key}'
        if isinstance(value, dict) and key != 'class_map':
            flat.update(flatten(value, f'{name}.'))
        else:
            flat[name] = value
    return flat


def load_run_config(path: str | Path) -> RunConfig:
    """Parse a flat dotted ``key = value`` file into a validated ``RunConfig``.

    Missing files raise ``FileNotFoundError``; bad values raise pydantic's ``ValidationError``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f'config file not found: {path}')
    values = {key: value for key, value in dotenv_values(path).items() if value is not None}
    return RunConfig.model_validate(unflatten(values))


def format_run_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in flatten(cfg.model_dump(mode='json')).items():
        if value is None and key != 'data.class_map':
            continue
        if key == 'model.input_hw':
            value = ','.join(str(v) for v in value)
        elif key == 'data.class_map':
            value = '' if not value else ','.join(f'{s}:{t}' for s, t in value.items())
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f'{key} = {value}')
    return '\n'.join(lines) + '\n'
