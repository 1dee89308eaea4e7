#!/usr/bin/env python3
"""
megspike command line
Synthetic cohorts, preprocessing, training, patient-wise cross-validation,
threshold calibration, evaluation and prediction
"""

import argparse
import dataclasses
import math
import sys
import traceback
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from megspike.lib.common import (
    CorruptDatasetError,
    InvalidArgumentError,
    MegSpikeError,
    RunInterrupted,
    UsageError,
    print_banner,
    print_error,
    print_info,
    print_phase_header,
    print_success,
    print_warning,
    report_failure,
)
from megspike.lib.config import RunConfig, RunHistory
from megspike.lib.evaluation import (
    BALANCED,
    DEFAULT_THRESHOLD,
    IMBALANCED,
    IterationResult,
    MetricsRow,
    aggregate_cv,
    balanced_indices,
    compute_metrics,
    optimal_threshold,
    predict_frames,
    threshold_curve,
)
from megspike.lib.models import MODEL_KINDS, TIMECNN_GCN
from megspike.lib.persistence import (
    dataset_kind,
    iter_recordings,
    load_checkpoint,
    load_frame_store,
    save_checkpoint,
    save_frames,
    save_recording,
    update_checkpoint_metadata,
    write_predictions,
    write_report,
)
from megspike.lib.rng import derive_rng
from megspike.lib.signal import FrameSet, extract_frames, preprocess_recording
from megspike.lib.synth import cohort_layout, generate_recording, iter_cohort
from megspike.lib.training import (
    CohortFrames,
    balance_dataset,
    frame_cohort,
    make_cv_plan,
    run_crossval,
    train_model,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _ArgumentParser(argparse.ArgumentParser):
    """argparse that reports misuse as UsageError instead of exiting with status 2"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, InvalidArgumentError, RunInterrupted)):
        return EXIT_USAGE
    return EXIT_DATA


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(Path(args.config)) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _data_dir(args, cfg: RunConfig) -> Path:
    data = getattr(args, "data", None) or cfg.data_dir
    if not data:
        raise UsageError("no data directory given (use --data or set data_dir in the config)")
    return Path(data)


def _load_cohort(data_dir: Path, cfg: RunConfig) -> CohortFrames:
    """Frames for every patient under `data_dir`, preprocessing raw recordings on the fly"""
    if dataset_kind(data_dir) == "recordings":
        return frame_cohort(iter_recordings(data_dir), cfg.preprocess_config())
    frames, positions = load_frame_store(data_dir)
    return CohortFrames(dict(frames), positions)


def _select_patients(cohort: CohortFrames, patients: Optional[str]) -> List[str]:
    ids = sorted(cohort.frames)
    if not patients:
        return ids
    wanted = [p.strip() for p in patients.split(",") if p.strip()]
    missing = [p for p in wanted if p not in cohort.frames]
    if missing:
        raise InvalidArgumentError(f"unknown patients {missing}")
    return sorted(set(wanted))


def _frames_for(cohort: CohortFrames, ids: Sequence[str]) -> FrameSet:
    return FrameSet.concat([cohort.frames[p] for p in ids])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig, verbose: bool) -> int:
    out = Path(args.out or cfg.data_dir or "data")
    synth_cfg = cfg.synth_config()
    positions = cohort_layout(synth_cfg)
    n_pos = n_frames = 0
    for i in range(synth_cfg.n_patients):
        rec = generate_recording(synth_cfg, i, positions)
        save_recording(rec, out / rec.patient_id)
        if verbose:
            print_info(f"{rec.patient_id}: {rec.spike_times.size} spikes, {rec.duration:.0f} s")
        frames = extract_frames(rec)
        n_frames += len(frames)
        n_pos += frames.n_positive
    RunHistory.save(cfg, "synth", out)
    if verbose:
        print_success(f"{synth_cfg.n_patients} recordings written to {out}")
        print_info(f"positive frames: {n_pos} of {n_frames} ({n_pos / max(n_frames, 1):.4f})")
    return EXIT_OK


def cmd_preprocess(args, cfg: RunConfig, verbose: bool) -> int:
    data = _data_dir(args, cfg)
    out = Path(args.out)
    prep = cfg.preprocess_config()
    count = 0
    for rec in iter_recordings(data):
        frames = extract_frames(preprocess_recording(rec, prep.low, prep.high, prep.target_rate))
        save_frames(frames, out / rec.patient_id, rec.sensor_positions)
        count += 1
        if verbose:
            print_info(f"{rec.patient_id}: {len(frames)} frames, {frames.n_positive} positive")
    if count == 0:
        raise CorruptDatasetError(f"{data}: no recordings found")
    RunHistory.save(cfg, "preprocess", out)
    if verbose:
        print_success(f"{count} frame datasets written to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, verbose: bool) -> int:
    kind = args.model or cfg.model_kinds[0]
    cohort = _load_cohort(_data_dir(args, cfg), cfg)
    ids = _select_patients(cohort, args.patients)
    n_val = max(1, math.ceil(cfg.val_fraction * len(ids)))
    if n_val >= len(ids):
        raise InvalidArgumentError(f"{len(ids)} patients cannot be split into training and validation")
    chosen = derive_rng(cfg.seed, "split").choice(len(ids), size=n_val, replace=False)
    val_ids = sorted(ids[i] for i in chosen)
    train_ids = [p for p in ids if p not in set(val_ids)]
    if verbose:
        print_info(f"train patients: {len(train_ids)}, validation patients: {', '.join(val_ids)}")

    train_set = balance_dataset(cohort.pool(train_ids), derive_rng(cfg.seed, "balance"))
    val_set = balance_dataset(cohort.pool(val_ids), derive_rng(cfg.seed, "balance-val"))
    graph = cohort.graph() if kind == TIMECNN_GCN else None
    ckpt = train_model(cfg.train_config(kind, verbose=verbose), train_set, val_set, graph)

    out = Path(args.out or Path(cfg.out_dir) / f"checkpoint-{kind}")
    save_checkpoint(ckpt, out)
    RunHistory.save(cfg, f"train --model {kind}", out)
    if verbose:
        print_success(f"{kind} checkpoint written to {out} "
                      f"(best epoch {ckpt.metadata.best_epoch}, val loss {ckpt.metadata.best_val_loss:.4f})")
    return EXIT_OK


def cmd_crossval(args, cfg: RunConfig, verbose: bool) -> int:
    out = Path(args.out or cfg.out_dir)
    data = getattr(args, "data", None) or cfg.data_dir
    if data:
        cohort = _load_cohort(Path(data), cfg)
    else:
        if verbose:
            print_info(f"no data directory: generating {cfg.n_patients} synthetic patients in memory")
        cohort = frame_cohort(iter_cohort(cfg.synth_config()), cfg.preprocess_config())

    plan = make_cv_plan(sorted(cohort.frames), cfg.folds, cfg.repetitions, cfg.val_fraction, cfg.seed)
    if verbose:
        print_info(f"{len(plan.iterations)} iterations over {len(plan.patient_ids)} patients, "
                   f"models: {', '.join(cfg.model_kinds)}")
    result = run_crossval(cohort, cfg.train_config(verbose=verbose), plan, cfg.model_kinds,
                          verbose=verbose, keep_checkpoints=cfg.save_checkpoints)

    paths = write_report(result.report, out)
    for (rep, fold, kind), ckpt in sorted(result.checkpoints.items()):
        save_checkpoint(ckpt, out / "checkpoints" / f"rep{rep}-fold{fold}-{kind}")
    RunHistory.save(cfg, "crossval", out)
    if verbose:
        print_phase_header(len(plan.iterations) + 1, "results")
        print(result.report.format_table())
        print_success(f"report written to {paths['json']}")
    return EXIT_OK


def cmd_calibrate(args, cfg: RunConfig, verbose: bool) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cohort = _load_cohort(_data_dir(args, cfg), cfg)
    ids = _select_patients(cohort, args.patients)
    probs, labels = predict_frames(ckpt, [cohort.frames[p] for p in ids])
    threshold = optimal_threshold(probs, labels)
    ckpt.metadata.threshold = threshold
    update_checkpoint_metadata(ckpt, args.checkpoint)
    if verbose:
        at_threshold = compute_metrics(probs, labels, threshold).f1
        at_default = compute_metrics(probs, labels, DEFAULT_THRESHOLD).f1
        print_success(f"threshold {threshold:.3f} (f1 {at_threshold:.1f}% vs {at_default:.1f}% at 0.5)")
    else:
        print(f"{threshold:.3f}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig, verbose: bool) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cohort = _load_cohort(_data_dir(args, cfg), cfg)
    ids = _select_patients(cohort, args.patients)
    threshold = args.threshold if args.threshold is not None else ckpt.metadata.threshold
    if threshold is None:
        print_warning("checkpoint is not calibrated; the imbalanced regime uses 0.5 (run `megspike calibrate`)")
        threshold = DEFAULT_THRESHOLD

    kind = ckpt.spec.kind
    probs, labels = predict_frames(ckpt, [cohort.frames[p] for p in ids])
    sample = balanced_indices(labels, derive_rng(cfg.seed, "test-sample"), shuffle=False, cap=True)
    result = IterationResult(kind, 0, 0, rows=[
        MetricsRow.from_metrics(kind, BALANCED, 0, 0, DEFAULT_THRESHOLD,
                                compute_metrics(probs[sample], labels[sample])),
        MetricsRow.from_metrics(kind, IMBALANCED, 0, 0, threshold, compute_metrics(probs, labels, threshold)),
    ], threshold=threshold, test_curve=threshold_curve(probs, labels))
    report = aggregate_cv([result])

    out = Path(args.out or Path(cfg.out_dir) / "evaluation")
    write_report(report, out)
    if verbose:
        print(report.format_table())
        print_success(f"report written to {out}")
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig, verbose: bool) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cohort = _load_cohort(_data_dir(args, cfg), cfg)
    ids = _select_patients(cohort, args.patients)
    frames = _frames_for(cohort, ids)
    probs = ckpt.predict_proba(frames.data)
    threshold = args.threshold if args.threshold is not None else (ckpt.metadata.threshold or DEFAULT_THRESHOLD)
    out = Path(args.out or Path(cfg.out_dir) / "predictions.csv")
    write_predictions(out, frames, probs, threshold)
    if verbose:
        print_success(f"{len(frames)} predictions written to {out} "
                      f"({int(np.sum(probs >= threshold))} at or above {threshold:.3f})")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "crossval": cmd_crossval,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


def build_parser() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, metavar='PATH',
                        help='Flat JSON run configuration (unknown keys are rejected)')
    common.add_argument('--seed', type=int, metavar='INT',
                        help='Master seed; overrides "seed" in the configuration')
    common.add_argument('--quiet', action='store_true',
                        help='Only print errors')

    parser = _ArgumentParser(
        prog='megspike',
        description='Interictal spike detection in MEG with Time CNN and Time CNN-GCN',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog='''
EXAMPLES:
  # Generate the default 95-patient synthetic cohort
  megspike synth --out data/

  # Recordings -> labeled frames
  megspike preprocess --data data/ --out frames/

  # Full patient-wise cross-validation (5 x 10 folds by default)
  megspike crossval --config run.json --out runs/cv

  # Single split, then threshold moving on held-out patients
  megspike train --data frames/ --model timecnn-gcn --out runs/gcn
  megspike calibrate --checkpoint runs/gcn --data frames/ --patients synth-090,synth-091
  megspike evaluate --checkpoint runs/gcn --data frames/ --patients synth-092,synth-093
  megspike predict --checkpoint runs/gcn --data frames/ --out predictions.csv

EXIT CODES:
  0  success
  1  usage or invalid argument
  2  data or IO error
''')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    p = sub.add_parser('synth', parents=[common], help='Generate a synthetic MEG cohort')
    p.add_argument('--out', type=str, metavar='DIR', help='Output directory (one sub-directory per patient)')

    p = sub.add_parser('preprocess', parents=[common], help='Filter, resample and frame recordings')
    p.add_argument('--data', type=str, metavar='DIR', help='Directory of recordings')
    p.add_argument('--out', type=str, metavar='DIR', required=True, help='Output directory for frame datasets')

    p = sub.add_parser('train', parents=[common], help='Train one model on a single train/validation split')
    p.add_argument('--data', type=str, metavar='DIR', help='Directory of recordings or frame datasets')
    p.add_argument('--model', type=str, choices=MODEL_KINDS, help='Model kind (default: first of model_kinds)')
    p.add_argument('--patients', type=str, metavar='IDS', help='Comma-separated patients to use (default: all)')
    p.add_argument('--out', type=str, metavar='DIR', help='Checkpoint directory')

    p = sub.add_parser('crossval', parents=[common], help='Patient-wise repeated k-fold cross-validation')
    p.add_argument('--data', type=str, metavar='DIR',
                   help='Directory of recordings or frame datasets (default: synthetic cohort from the config)')
    p.add_argument('--out', type=str, metavar='DIR', help='Report directory (default: out_dir)')

    for name, text in (('calibrate', 'Pick the f1-maximizing threshold on validation patients'),
                       ('evaluate', 'Balanced and imbalanced metrics of a checkpoint'),
                       ('predict', 'Per-frame spike probabilities as CSV')):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument('--checkpoint', type=str, metavar='DIR', required=True, help='Checkpoint directory')
        p.add_argument('--data', type=str, metavar='DIR', help='Directory of recordings or frame datasets')
        p.add_argument('--patients', type=str, metavar='IDS', help='Comma-separated patients (default: all)')
        if name != 'calibrate':
            p.add_argument('--threshold', type=float, help='Decision threshold (default: calibrated or 0.5)')
            p.add_argument('--out', type=str, metavar='PATH', help='Output location')
    return parser


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command and return its exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config(args)
        verbose = not args.quiet
        if verbose:
            print_banner(args.command)
        return COMMANDS[args.command](args, cfg, verbose)
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else EXIT_OK
    except KeyboardInterrupt:
        report_failure(RunInterrupted("run interrupted by user"))
        return EXIT_USAGE
    except (MegSpikeError, OSError) as e:
        report_failure(e)
        return exit_code_for(e)
    except Exception as e:
        print_error(f"Error: {e}")
        traceback.print_exc()
        return EXIT_USAGE


def main():
    """Console entry point"""
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
