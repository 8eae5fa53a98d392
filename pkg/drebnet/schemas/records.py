from pydantic import BaseModel, ConfigDict, Field, model_validator

Box = tuple[float, float, float, float]


class GroundTruthBox(BaseModel):
    model_config = ConfigDict(frozen=True)

    class_id: int = Field(ge=0)
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @model_validator(mode='after')
    def check_extent(self) -> 'GroundTruthBox':
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise ValueError(f'box extent must be positive, got {self.box}')
        return self

    @property
    def box(self) -> Box:
        return self.x_min, self.y_min, self.x_max, self.y_max

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


class Detection(BaseModel):
    model_config = ConfigDict(frozen=True)

    class_id: int = Field(ge=0)
    box: Box
    score: float = Field(allow_inf_nan=False)
    image_id: int = 0

    @model_validator(mode='after')
    def check_extent(self) -> 'Detection':
        x_min, y_min, x_max, y_max = self.box
        if x_max < x_min or y_max < y_min:
            raise ValueError(f'invalid detection box {self.box}')
        return self

    def to_line(self) -> str:
        x_min, y_min, x_max, y_max = self.box
        return (f'{self.image_id} {self.class_id} {self.score:.6f} '
                f'{x_min:.3f} {y_min:.3f} {x_max:.3f} {y_max:.3f}')

    @classmethod
    def from_line(cls, line: str) -> 'Detection':
        image_id, class_id, score, x_min, y_min, x_max, y_max = line.split()
        return cls(image_id=int(image_id), class_id=int(class_id), score=float(score),
                   box=(float(x_min), float(y_min), float(x_max), float(y_max)))


class DatasetRecord(BaseModel):
    image_path: str
    boxes: list[GroundTruthBox] = []
    ignored_regions: list[Box] = []


class DatasetIndex(BaseModel):
    records: list[DatasetRecord] = []

    def ground_truth(self) -> dict[int, list[GroundTruthBox]]:
        return {i: list(record.boxes) for i, record in enumerate(self.records)}


class TrajectoryParams(BaseModel):
    """Camera-shake trajectory knobs; ``max_jitter`` is the path length in pixels."""

    model_config = ConfigDict(extra='forbid')

    length_steps: int = Field(default=64, ge=2)
    anxiety: float = Field(default=0.005, ge=0)
    max_jitter: float = Field(default=10.0, ge=0)
    exposure_fraction: float = Field(default=1.0, gt=0, le=1)
    noise_scale: float = Field(default=10.0, ge=0)
    centripetal: float = Field(default=0.35, ge=0)
