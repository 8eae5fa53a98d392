"""Two-phase training loop.

Epochs up to ``cfg.switch_epoch`` train detector and restoration branch jointly
on ``L_det + L_brab``; later epochs drop the restoration decoder from the graph
and optimise ``L_det`` only. Every random draw (shuffle, augmentation, blur)
comes from a named stream of ``cfg.seed``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from drebnet.core.errors import ConfigError, DatasetError, NonFiniteError
from drebnet.engine.dump import dump_tensor
from drebnet.engine.optim import OptimState, optimizer_step
from drebnet.engine.rng import derive_seed, stream
from drebnet.engine.tape import backward, reset_tape
from drebnet.engine.tensor import Tensor
from drebnet.models.drebnet import DrebNet, Phase, build_model, forward_train
from drebnet.schemas.records import DatasetIndex, DatasetRecord, GroundTruthBox, TrajectoryParams
from drebnet.schemas.run import AugmentConfig, RunConfig
from drebnet.services.blur import make_blur_pair
from drebnet.services.checkpoint import load_checkpoint, make_checkpoint, restore_model, restore_optimizer, save_checkpoint
from drebnet.services.dataset import load_dataset, load_record_image, read_image, resize_sample
from drebnet.services.losses import LossParts, focal_loss, mse_loss, offset_loss, ssim_loss, total_loss, wh_loss
from drebnet.services.targets import encode_targets, stack_targets

logger = logging.getLogger(__name__)

TRAIN_CHECKPOINT = 'train.drbc'
INFER_CHECKPOINT = 'infer.drbc'
LOSS_NAMES = ('hm', 'wh', 'off', 'mse', 'ssim', 'total')


@dataclass
class Sample:
    blurred: np.ndarray
    sharp: np.ndarray
    boxes: list[GroundTruthBox]
    seed: int


@dataclass
class EpochRecord:
    epoch: int
    phase: Phase
    lr: float
    steps: int
    losses: dict[str, float | None]

    def log_line(self, total_epochs: int) -> str:
        def fmt(value: float | None) -> str:
            return '-' if value is None else f'{value:.4f}'

        parts = ' '.join(f'{name}={fmt(self.losses.get(name))}' for name in LOSS_NAMES)
        return f'Epoch {self.epoch}/{total_epochs} phase={self.phase.value} lr={self.lr:.6f} {parts}'


@dataclass
class TrainResult:
    model: DrebNet
    optim: OptimState
    history: list[EpochRecord] = field(default_factory=list)
    train_checkpoint: Path | None = None
    infer_checkpoint: Path | None = None
    step_losses: list[float] = field(default_factory=list)


EpochCallback = Callable[[EpochRecord, DrebNet], None]


def phase_for_epoch(epoch: int, cfg: RunConfig) -> Phase:
    if cfg.model.enable_brab and epoch <= cfg.switch_epoch:
        return Phase.JOINT
    return Phase.DETACHED_BRAB


def make_batches(count: int, batch_size: int, rng: np.random.Generator, min_batch: int = 1) -> list[list[int]]:
    """Shuffled index batches; a remainder smaller than ``min_batch`` joins the batch before it."""
    order = [int(i) for i in rng.permutation(count)]
    batches = [order[i:i + batch_size] for i in range(0, count, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < min_batch:
        batches[-2].extend(batches.pop())
    return batches


def hflip(image: np.ndarray, boxes: list[GroundTruthBox]) -> tuple[np.ndarray, list[GroundTruthBox]]:
    width = image.shape[-1]
    flipped = [GroundTruthBox(class_id=b.class_id, x_min=width - b.x_max, y_min=b.y_min,
                              x_max=width - b.x_min, y_max=b.y_max) for b in boxes]
    return np.ascontiguousarray(image[..., ::-1]), flipped


def color_jitter(image: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    scaled = image * brightness
    mean = scaled.mean()
    return np.clip((scaled - mean) * contrast + mean, 0.0, 1.0).astype(image.dtype)


def augment(images: tuple[np.ndarray, ...], boxes: list[GroundTruthBox], cfg: AugmentConfig,
            rng: np.random.Generator) -> tuple[tuple[np.ndarray, ...], list[GroundTruthBox]]:
    """Same flip and jitter factors for every image of one sample."""
    flip = rng.uniform() < cfg.hflip_prob
    s = cfg.color_jitter_strength
    brightness, contrast = rng.uniform(1.0 - s, 1.0 + s, size=2)
    out = []
    out_boxes = boxes
    for image in images:
        if flip:
            image, out_boxes = hflip(image, boxes)
        out.append(color_jitter(image, float(brightness), float(contrast)))
    return tuple(out), out_boxes


class SampleSource:
    """Turns dataset records into (blurred, sharp, boxes) samples for one epoch position."""

    def __init__(self, index: DatasetIndex, cfg: RunConfig, dtype: np.dtype):
        self.index = index
        self.cfg = cfg
        self.dtype = dtype
        self.trajectory = TrajectoryParams(length_steps=cfg.blur.length_steps, anxiety=cfg.blur.anxiety,
                                           max_jitter=cfg.blur.max_jitter)
        self._cache: dict[int, tuple[np.ndarray, np.ndarray | None, list[GroundTruthBox]]] = {}

    def _load(self, position: int) -> tuple[np.ndarray, np.ndarray | None, list[GroundTruthBox]]:
        if position not in self._cache:
            record: DatasetRecord = self.index.records[position]
            hw = self.cfg.model.input_hw
            image, boxes = resize_sample(load_record_image(record), list(record.boxes), hw)
            sharp = None
            if self.cfg.data.sharp_dir:
                sharp_path = Path(self.cfg.data.sharp_dir) / Path(record.image_path).name
                if not sharp_path.is_file():
                    raise DatasetError(f'sharp counterpart not found: {sharp_path}')
                sharp, _ = resize_sample(read_image(sharp_path), [], hw)
            self._cache[position] = (image, sharp, boxes)
        return self._cache[position]

    def sample(self, position: int, epoch: int) -> Sample:
        image, sharp, boxes = self._load(position)
        seed = derive_seed(self.cfg.seed, 'blur', epoch, position)
        rng = stream(self.cfg.seed, 'augment', epoch, position)
        if sharp is not None:
            (blurred, sharp), boxes = augment((image, sharp), boxes, self.cfg.augment, rng)
        else:
            (sharp,), boxes = augment((image,), boxes, self.cfg.augment, rng)
            if self.cfg.blur.enabled:
                blurred = make_blur_pair(sharp, seed, self.trajectory, k_psf=self.cfg.blur.psf_size).blurred
            else:
                blurred = sharp
        return Sample(blurred=blurred.astype(self.dtype), sharp=sharp.astype(self.dtype), boxes=boxes, seed=seed)


def compute_losses(model: DrebNet, samples: list[Sample], phase: Phase, cfg: RunConfig) -> tuple[Tensor, LossParts]:
    x = Tensor(np.stack([s.blurred for s in samples]))
    det, brab = forward_train(x, model, phase)
    targets = stack_targets([
        encode_targets(s.boxes, cfg.model.num_classes, cfg.model.input_hw, min_overlap=cfg.detect.min_overlap,
                       dtype=model.dtype)
        for s in samples
    ])
    parts = LossParts(
        hm=focal_loss(det.hm, targets.hm_t, targets.pos_mask, gamma=cfg.loss.gamma, beta=cfg.loss.beta),
        wh=wh_loss(det.wh, targets.wh_t, targets.pos_mask),
        off=offset_loss(det.reg, targets.reg_t, targets.pos_mask),
    )
    if brab is not None:
        sharp = np.stack([s.sharp for s in samples])
        parts.mse = mse_loss(brab.restored, sharp)
        parts.ssim = ssim_loss(brab.restored, sharp)
    return total_loss(parts, cfg.loss, phase), parts


def _trainable(model: DrebNet, phase: Phase) -> dict[str, Tensor]:
    return model.parameters() if phase is Phase.JOINT else model.inference_parameters()


def _abort_nonfinite(samples: list[Sample], out_dir: Path, epoch: int, step: int, parts: LossParts) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f'nonfinite_epoch{epoch}_step{step}.drbt'
    dump_tensor(np.stack([s.blurred for s in samples]), path)
    seeds = [s.seed for s in samples]
    logger.error('Non-finite loss at epoch %d step %d: %s; batch blur seeds %s dumped to %s',
                 epoch, step, parts.as_dict(), seeds, path)
    raise NonFiniteError(f'non-finite loss at epoch {epoch} step {step} (blur seeds {seeds}); batch dumped to {path}')


def _check_batching(cfg: RunConfig, model: DrebNet, count: int) -> int:
    if count == 0:
        raise DatasetError('training index holds no images')
    # the global attention branch normalises a 1x1 map; batch statistics need two images
    if model.magff is None:
        return 1
    if cfg.optim.batch_size < 2 or count < 2:
        raise ConfigError('MAGFF training needs batch_size >= 2 and at least two images')
    return 2


def train(cfg: RunConfig, index: DatasetIndex | None = None, resume: str | Path | None = None,
          on_epoch_end: EpochCallback | None = None, save: bool = True) -> TrainResult:
    if index is None:
        index = load_dataset(cfg.data.train_index, cfg.data.image_dir, cfg.data.class_map, cfg.data.frame_stride)

    start_epoch = 1
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.mode != 'train':
            raise ConfigError(f'cannot resume from an inference checkpoint: {resume}')
        if ckpt.config.model != cfg.model:
            raise ConfigError('resume checkpoint was trained with a different model config')
        model = restore_model(ckpt)
        start_epoch = int(ckpt.meta.get('epoch', 0)) + 1
    else:
        model = build_model(cfg.model, cfg.seed)
    model.train()

    min_batch = _check_batching(cfg, model, len(index.records))
    batches_per_epoch = len(make_batches(len(index.records), cfg.optim.batch_size, stream(cfg.seed, 'shuffle', 0),
                                         min_batch))
    optim = OptimState(learning_rate=cfg.optim.lr0, schedule=cfg.optim.schedule, rule=cfg.optim.rule,
                       total_steps=cfg.optim.total_epochs * batches_per_epoch)
    if resume is not None:
        restore_optimizer(ckpt, optim)

    source = SampleSource(index, cfg, model.dtype)
    out_dir = Path(cfg.output_dir)
    result = TrainResult(model=model, optim=optim)
    logger.info('Training %d image(s) for epochs %d..%d, joint phase through epoch %d, %d step(s) per epoch',
                len(index.records), start_epoch, cfg.optim.total_epochs, cfg.switch_epoch, batches_per_epoch)

    for epoch in range(start_epoch, cfg.optim.total_epochs + 1):
        phase = phase_for_epoch(epoch, cfg)
        params = _trainable(model, phase)
        sums = dict.fromkeys(LOSS_NAMES, 0.0)
        steps = 0
        lr = optim.effective_lr()
        for batch in make_batches(len(index.records), cfg.optim.batch_size, stream(cfg.seed, 'shuffle', epoch),
                                  min_batch):
            samples = [source.sample(position, epoch) for position in batch]
            reset_tape()
            loss, parts = compute_losses(model, samples, phase, cfg)
            value = loss.item()
            if not math.isfinite(value):
                _abort_nonfinite(samples, out_dir, epoch, optim.step, parts)
            backward(loss)
            lr = optimizer_step(params, optim)
            model.zero_grad()
            steps += 1
            result.step_losses.append(value)
            for name, part in parts.as_dict().items():
                if part is not None:
                    sums[name] += part
            sums['total'] += value

        losses: dict[str, float | None] = {name: sums[name] / steps for name in LOSS_NAMES}
        if phase is not Phase.JOINT:
            losses['mse'] = losses['ssim'] = None
        record = EpochRecord(epoch=epoch, phase=phase, lr=lr, steps=steps, losses=losses)
        result.history.append(record)
        logger.info(record.log_line(cfg.optim.total_epochs))
        if on_epoch_end is not None:
            on_epoch_end(record, model)

    if save:
        last_epoch = max(cfg.optim.total_epochs, start_epoch - 1)
        result.train_checkpoint = out_dir / TRAIN_CHECKPOINT
        result.infer_checkpoint = out_dir / INFER_CHECKPOINT
        save_checkpoint(make_checkpoint(model, cfg, 'train', optim, epoch=last_epoch), result.train_checkpoint)
        save_checkpoint(make_checkpoint(model, cfg, 'infer', epoch=last_epoch), result.infer_checkpoint)
    return result
