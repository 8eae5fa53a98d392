"""Command-line entry point: ``drebnet <command> ...``.

Exit codes: 0 on success, 1 for usage and configuration problems, 2 for
runtime failures.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from PIL import UnidentifiedImageError
from pydantic import ValidationError

from drebnet import __version__
from drebnet.core.errors import ConfigError, DrebError, UsageError
from drebnet.core.logging_setup import setup_logging
from drebnet.engine.dump import dump_tensor
from drebnet.engine.rng import derive_seed
from drebnet.models.drebnet import build_model
from drebnet.schemas.records import TrajectoryParams
from drebnet.schemas.run import load_run_config
from drebnet.services.blur import STATS_COLUMNS, blur_stats, make_blur_pair, write_stats_csv
from drebnet.services.dataset import read_image, write_image
from drebnet.services.evaluation import UNDEFINED, detect_image, evaluate
from drebnet.services.flops import measure
from drebnet.services.selfcheck import SUITES, run_gradcheck
from drebnet.services.synthetic import write_synthetic_dataset
from drebnet.services.training import train

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = ('.ppm', '.png')


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _image_files(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f'directory not found: {directory}')
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _odd_size(text: str) -> int:
    try:
        value = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f'expected an integer, got {text!r}') from exc
    if value < 1 or value % 2 == 0:
        raise argparse.ArgumentTypeError(f'PSF size must be a positive odd integer, got {value}')
    return value


def _iou_list(text: str) -> list[float]:
    try:
        values = [float(part) for part in text.split(',') if part.strip()]
    except ValueError as exc:
        raise UsageError(f'--iou takes comma separated numbers, got {text!r}') from exc
    if not values or any(not 0 < v < 1 for v in values):
        raise UsageError(f'--iou thresholds must lie in (0, 1), got {text!r}')
    return values


def cmd_synth_blur(args: argparse.Namespace) -> int:
    params = TrajectoryParams(length_steps=args.steps, max_jitter=args.max_jitter)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = _image_files(args.input)
    for path in files:
        pair = make_blur_pair(read_image(path), derive_seed(args.seed, path.name), params, k_psf=args.psf_size)
        write_image(pair.blurred, out_dir / path.name)
    print(f'blurred {len(files)} image(s) into {out_dir}')
    return 0


def cmd_synth_scenes(args: argparse.Namespace) -> int:
    size = args.size
    write_synthetic_dataset(args.out, args.count, seed=args.seed, hw=(size, size), num_classes=args.classes)
    print(f'rendered {args.count} scene(s) into {args.out}')
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    result = train(cfg, resume=args.resume)
    print(f'train checkpoint: {result.train_checkpoint}')
    print(f'infer checkpoint: {result.infer_checkpoint}')
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    image_dir = args.image_dir or str(Path(args.data).parent)
    report = evaluate(args.ckpt, args.data, image_dir, _iou_list(args.iou), args.out,
                      allow_train=args.allow_train, workers=args.workers)
    for metric, value in report.rows:
        print(f'{metric:<16} {UNDEFINED if value is None else f"{value:.4f}"}')
    return 0


def cmd_detect(args: argparse.Namespace) -> int:
    detections, out = detect_image(args.ckpt, args.image, score_thresh=args.thresh, allow_train=args.allow_train)
    print(f'{len(detections)} detections')
    for det in detections:
        print(det.to_line())
    if args.dump_heatmap:
        dump_tensor(out.hm, args.dump_heatmap)
        logger.info('Heatmap written to %s', args.dump_heatmap)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_gradcheck(args.module, seed=args.seed)
    for result in results:
        print(f'{result.name:<28} max relative error {result.error:.3e}  {"PASS" if result.passed else "FAIL"}')
    worst = max(r.error for r in results)
    passed = all(r.passed for r in results)
    print(f'{"PASS" if passed else "FAIL"} (max relative error {worst:.3e})')
    return 0 if passed else 2


def cmd_stats(args: argparse.Namespace) -> int:
    root = Path(args.pairs)
    sharp_files = _image_files(root / 'sharp')
    pairs = []
    for sharp_path in sharp_files:
        blurred_path = root / 'blurred' / sharp_path.name
        if not blurred_path.is_file():
            raise UsageError(f'no blurred counterpart for {sharp_path.name} in {root / "blurred"}')
        pairs.append((read_image(sharp_path), read_image(blurred_path)))
    rows = blur_stats(pairs)
    print(' '.join(f'{c:>10}' for c in STATS_COLUMNS))
    for row in rows:
        print(f'{row["psnr_bin"]:>10} {row["count"]:>10} {row["mean_ssim"]:>10.4f}')
    if args.out:
        write_stats_csv(rows, args.out)
    return 0


def cmd_flops(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    model = build_model(cfg.model, cfg.seed)
    for mode in ('train', 'infer'):
        print(f'{mode:<6} {measure(model, mode).as_row()}')
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='drebnet', description='Blur-robust small-object detector: training and tooling.')
    parser.add_argument('--version', action='version', version=f'drebnet {__version__}')
    parser.add_argument('--log', choices=('error', 'info', 'debug'), default=None,
                        help='log level (overrides DREB_LOG)')
    commands = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)

    p = commands.add_parser('synth-blur', help='blur every PPM/PNG of a directory with random camera shake')
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--steps', type=int, default=64)
    p.add_argument('--psf-size', type=_odd_size, default=17)
    p.add_argument('--max-jitter', type=float, default=10.0)
    p.set_defaults(handler=cmd_synth_blur)

    p = commands.add_parser('synth-scenes', help='render labelled rectangle scenes with an index file')
    p.add_argument('--out', required=True)
    p.add_argument('--count', type=int, default=8)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--size', type=int, default=64)
    p.add_argument('--classes', type=int, default=2)
    p.set_defaults(handler=cmd_synth_scenes)

    p = commands.add_parser('train', help='two-phase training from a config file')
    p.add_argument('--config', required=True)
    p.add_argument('--resume', default=None, help='training checkpoint to continue from')
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser('eval', help='evaluate a checkpoint on an annotation index')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--data', required=True, help='annotation index file')
    p.add_argument('--image-dir', default=None, help='image directory (defaults to the index directory)')
    p.add_argument('--iou', default='0.5')
    p.add_argument('--out', default='eval')
    p.add_argument('--allow-train', action='store_true')
    p.add_argument('--workers', type=int, default=1)
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser('detect', help='detect objects in one image')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--image', required=True)
    p.add_argument('--thresh', type=float, default=0.1)
    p.add_argument('--dump-heatmap', default=None, help='write the center heatmap as a DRBT tensor dump')
    p.add_argument('--allow-train', action='store_true')
    p.set_defaults(handler=cmd_detect)

    p = commands.add_parser('gradcheck', help='finite-difference gradient self-check')
    p.add_argument('--module', choices=('all', *SUITES), default='all')
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(handler=cmd_gradcheck)

    p = commands.add_parser('stats', help='PSNR histogram with mean SSIM per bin over sharp/blurred pairs')
    p.add_argument('--pairs', required=True, help='directory holding sharp/ and blurred/ subdirectories')
    p.add_argument('--out', default=None, help='optional CSV output')
    p.set_defaults(handler=cmd_stats)

    p = commands.add_parser('flops', help='FLOPs and parameter split of the train and inference graphs')
    p.add_argument('--config', required=True)
    p.set_defaults(handler=cmd_flops)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f'drebnet: error: {exc}', file=sys.stderr)
        return 1
    setup_logging(args.log)
    try:
        return args.handler(args)
    except (UsageError, ConfigError, ValidationError, FileNotFoundError) as exc:
        logger.error('%s', exc)
        print(f'drebnet: error: {exc}', file=sys.stderr)
        return 1
    except DrebError as exc:
        logger.error('%s failed: %s', args.command, exc)
        print(f'drebnet: {args.command} failed: {exc}', file=sys.stderr)
        return 2
    except (UnidentifiedImageError, OSError) as exc:
        logger.error('%s failed reading or writing a file: %s', args.command, exc)
        print(f'drebnet: {args.command} failed: {exc}', file=sys.stderr)
        return 2


if __name__ == '__main__':
    sys.exit(main())
