from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    in_channels: int = Field(default=3, ge=1)
    base_channels: int = Field(default=16, ge=4)
    num_classes: int = Field(default=2, ge=1)
    input_hw: tuple[int, int] = (64, 64)
    variant: Literal['full', 'tiny'] = 'full'
    enable_brab: bool = True
    enable_magff: bool = True
    enable_lfamm: bool = True
    shallow_stage: int = Field(default=2, ge=1, le=3)
    magff_reduction: int = Field(default=4, ge=1)
    head_channels: int | None = None

    @model_validator(mode='after')
    def check_shape_contract(self) -> 'ModelConfig':
        h, w = self.input_hw
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise ValueError(f'input_hw must be positive multiples of 32, got {self.input_hw}')
        shallow = min(self.base_channels * 2 ** self.shallow_stage, 8 * self.base_channels)
        if self.enable_magff and shallow % self.magff_reduction:
            raise ValueError(
                f'magff_reduction {self.magff_reduction} must divide shallow channel count {shallow}')
        return self

    @property
    def output_hw(self) -> tuple[int, int]:
        return self.input_hw[0] // 4, self.input_hw[1] // 4
