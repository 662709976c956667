#!/usr/bin/env python3
"""
HRTF upsampling toolkit
Command-line surface: synthetic data, sparse selection, training, upsampling,
baselines, evaluation and CSV interchange
"""

import os
import sys
import logging
import argparse
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

# Load environment variables first
load_dotenv()

# Add project root to path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from config.logging_config import install_exception_hook, setup_logging
from config.settings import settings
from models.config_models import (
    ModelConfig,
    SHFitConfig,
    SynthConfig,
    TrainConfig,
    default_fit_config,
    minimal_decoder_stages,
)
from models.hrtf_models import SPARSITY_LEVELS, make_equiangular_grid
from models.sh_transformer import upsample
from services.baseline_service import barycentric_upsample, sh_baseline_upsample
from services.container_service import read_checkpoint, read_container, write_container
from services.dataset_service import (
    export_frame,
    import_csv,
    load_dataset,
    sparse_from_set,
    subject_path,
    write_sparse,
)
from services.synth_service import generate_dataset, make_sparse
from utils.exceptions import HRTFError, UsageError
from utils.helpers import atomic_write_with
from utils.validators import (
    parse_grid_spec,
    read_config_file,
    validate_level,
    validate_output_path,
    validate_report_path,
)
from workflows.evaluation_workflow import METHODS, EvaluationWorkflow
from workflows.training_workflow import TrainingWorkflow, split_subjects

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _target_grid(spec: str):
    n_az, n_el = parse_grid_spec(spec)
    return make_equiangular_grid(n_az, n_el)


def _read_sparse(path: str):
    hrtf = read_container(path)
    if hrtf.n_directions not in SPARSITY_LEVELS:
        raise UsageError(f"{path} holds {hrtf.n_directions} directions, not a sparsity level")
    return sparse_from_set(hrtf, hrtf.n_directions)


def _fit_config(args, level: int) -> SHFitConfig:
    default = default_fit_config(level) if level in settings.sh.order_by_level else None
    order = args.order if args.order is not None else (default.order if default else None)
    if order is None:
        raise UsageError("--order is required for this sparsity level")
    ridge = args.ridge_lambda if args.ridge_lambda is not None else settings.sh.ridge_lambda
    return SHFitConfig(order=order, ridge_lambda=ridge)


# Subcommands

def cmd_synth(args) -> int:
    n_az, n_el = parse_grid_spec(args.grid)
    cfg = SynthConfig(seed=args.seed, band_limit=args.band_limit, n_bins=args.bins, n_az=n_az, n_el=n_el,
                      sample_rate_hz=args.rate)
    subjects = generate_dataset(cfg, args.subjects)
    for i, subject in enumerate(subjects):
        path = subject_path(args.out, f"subject_{args.seed + i:04d}")
        write_container(subject, path, force=args.force)
    print(f"Wrote {len(subjects)} subjects to {args.out}")
    return EXIT_OK


def cmd_sparse(args) -> int:
    validate_level(args.level)
    validate_output_path(args.out, args.force)
    sparse = make_sparse(read_container(args.input), args.level)
    write_sparse(sparse, args.out, force=True)
    print(f"Selected directions {list(sparse.source_indices)}")
    return EXIT_OK


def _model_config(level: int, n_bins: int, overrides: dict) -> ModelConfig:
    fields = {'order_in': default_fit_config(level).order, 'n_bins': n_bins}
    fields.update(overrides)
    if 'decoder_stages' not in overrides:
        draft = ModelConfig(**fields)
        fields['decoder_stages'] = minimal_decoder_stages(draft.order_in, draft.order_out, draft.encoder_stages)
    return ModelConfig(**fields)


def cmd_train(args) -> int:
    validate_level(args.level)
    validate_output_path(args.out, args.force)
    model_kwargs, train_kwargs = read_config_file(args.config) if args.config else ({}, {})
    if args.max_steps is not None:
        train_kwargs['max_steps'] = args.max_steps
    if args.epochs is not None:
        train_kwargs['epochs'] = args.epochs
    train_cfg = TrainConfig(**train_kwargs)

    entries = load_dataset(args.data, args.level)
    model_cfg = _model_config(args.level, entries[0].ground_truth.n_bins, model_kwargs)
    train_set, val_set = split_subjects(entries, train_cfg.val_fraction, train_cfg.seed)

    workflow = TrainingWorkflow(model_cfg, train_cfg, checkpoint_path=args.out,
                                meta={'level': args.level, 'data': os.path.abspath(args.data)})
    result = workflow.run(train_set, val_set)
    if result.status != "success":
        print(f"error: {'; '.join(result.errors)}", file=sys.stderr)
        return EXIT_RUNTIME
    print(result.summary)
    return EXIT_OK


def cmd_upsample(args) -> int:
    validate_output_path(args.out, args.force)
    checkpoint = read_checkpoint(args.ckpt)
    sparse = _read_sparse(args.input)
    fit_cfg = checkpoint.fit_config(args.ridge_lambda)
    result = upsample(checkpoint.weights, sparse, _target_grid(args.grid), fit_cfg)
    write_container(result, args.out, force=True)
    print(f"Upsampled {sparse.n_directions} -> {result.n_directions} directions")
    return EXIT_OK


def cmd_baseline(args) -> int:
    validate_output_path(args.out, args.force)
    sparse = _read_sparse(args.input)
    target = _target_grid(args.grid)
    if args.method == 'barycentric':
        result = barycentric_upsample(sparse, target)
    else:
        result = sh_baseline_upsample(sparse, target, _fit_config(args, sparse.sparsity_level))
    write_container(result, args.out, force=True)
    print(f"{args.method} baseline: {sparse.n_directions} -> {result.n_directions} directions")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    validate_level(args.level)
    validate_report_path(args.report)
    validate_output_path(args.report, args.force)
    weights, fit_cfg = None, None
    if args.method == 'model':
        if not args.ckpt:
            raise UsageError("--ckpt is required for --method model")
        checkpoint = read_checkpoint(args.ckpt)
        weights, fit_cfg = checkpoint.weights, checkpoint.fit_config(args.ridge_lambda)
    elif args.method == 'sh':
        fit_cfg = _fit_config(args, args.level)

    entries = load_dataset(args.data, args.level)
    workflow = EvaluationWorkflow(args.method, args.level, weights=weights, fit_cfg=fit_cfg, workers=args.workers)
    result = workflow.run(entries, report_path=args.report)
    if result.status != "success":
        print(f"error: {'; '.join(result.errors)}", file=sys.stderr)
        return EXIT_RUNTIME
    print(result.summary)
    return EXIT_OK


def cmd_export_csv(args) -> int:
    validate_output_path(args.out, args.force)
    reference = read_container(args.reference) if args.reference else None
    frame = export_frame(read_container(args.input), median_plane=args.median_plane, reference=reference)
    atomic_write_with(args.out, lambda tmp: frame.to_csv(tmp, index=False, float_format='%.17g'))
    print(f"Wrote {len(frame)} rows to {args.out}")
    return EXIT_OK


def cmd_import_csv(args) -> int:
    validate_output_path(args.out, args.force)
    grid = _target_grid(args.grid) if args.grid else None
    hrtf = import_csv(args.input, args.rate, grid=grid)
    write_container(hrtf, args.out, force=True)
    print(f"Imported {hrtf.n_directions} directions x {hrtf.n_bins} bins")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='hrtf', description='HRTF upsampling toolkit')
    parser.add_argument('--log-level', default=None, choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='Console log level (default from LOG_LEVEL)')
    parser.add_argument('--force', action='store_true', help='Overwrite existing outputs')
    # SUPPRESS keeps a subcommand without the flag from resetting a top-level --force
    writer = argparse.ArgumentParser(add_help=False)
    writer.add_argument('--force', action='store_true', default=argparse.SUPPRESS,
                        help='Overwrite existing outputs')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', help='Generate band-limited synthetic subjects', parents=[writer])
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--subjects', type=int, default=1)
    p.add_argument('--grid', default=settings.data.grid, help='NAZxNEL')
    p.add_argument('--band-limit', type=int, default=3)
    p.add_argument('--bins', type=int, default=settings.data.n_bins)
    p.add_argument('--rate', type=float, default=float(settings.data.sample_rate_hz))
    p.add_argument('--out', required=True, help='Output directory')
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser('sparse', help='Select a farthest-point sparse subset', parents=[writer])
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--level', type=int, required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_sparse)

    p = sub.add_parser('train', help='Train a model for one sparsity level', parents=[writer])
    p.add_argument('--data', required=True)
    p.add_argument('--level', type=int, required=True)
    p.add_argument('--config', default=None, help='key=value file of model and training settings')
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--max-steps', type=int, default=None)
    p.add_argument('--out', required=True, help='Checkpoint path')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('upsample', help='Upsample a sparse container with a trained model', parents=[writer])
    p.add_argument('--ckpt', required=True)
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--grid', default=settings.data.grid)
    p.add_argument('--lambda', dest='ridge_lambda', type=float, default=None)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_upsample)

    p = sub.add_parser('baseline', help='Barycentric or SH interpolation', parents=[writer])
    p.add_argument('--method', choices=['barycentric', 'sh'], required=True)
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--grid', default=settings.data.grid)
    p.add_argument('--order', type=int, default=None)
    p.add_argument('--lambda', dest='ridge_lambda', type=float, default=None)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_baseline)

    p = sub.add_parser('evaluate', help='Compute LSD / ILD / ITD of a method over a dataset', parents=[writer])
    p.add_argument('--method', choices=list(METHODS), required=True)
    p.add_argument('--ckpt', default=None)
    p.add_argument('--data', required=True)
    p.add_argument('--level', type=int, required=True)
    p.add_argument('--order', type=int, default=None)
    p.add_argument('--lambda', dest='ridge_lambda', type=float, default=None)
    p.add_argument('--workers', type=int, default=None)
    p.add_argument('--report', required=True, help='OUT.csv or OUT.json')
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser('export-csv', help='Write a per-direction per-bin dB table', parents=[writer])
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--median-plane', action='store_true')
    p.add_argument('--reference', default=None, help='Ground truth for a per-direction LSD column')
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_export_csv)

    p = sub.add_parser('import-csv', help='Convert a CSV intermediate into a container', parents=[writer])
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--grid', default=None, help='Snap rows onto an equiangular NAZxNEL grid')
    p.add_argument('--rate', type=float, default=float(settings.data.sample_rate_hz))
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_import_csv)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    setup_logging(level=args.log_level)
    install_exception_hook()

    try:
        return args.handler(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (HRTFError, OSError, ValidationError) as e:
        logger.debug(f"{args.command} failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
