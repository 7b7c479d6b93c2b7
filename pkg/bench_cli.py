#!/usr/bin/env python3

"""
Command-line runner for SpikeHARQ experiments.

Training stages (run in this order, each writing its own checkpoint):
    gen-data, train-backbone, train-codec, finetune, train-simnet
Experiments (rows go to the sqlite results database):
    sweep, harq, baseline, gaps
Output:
    report   writes the CSV files from the stored rows
    pipeline runs the training stages in order (--full adds every experiment and the report)

Exit codes: 0 success, 2 configuration error, 3 training divergence, 1 any other failure.
"""
import argparse
import logging
import os
import sys
from dataclasses import asdict, dataclass

import numpy as np

from backbone import BackboneConfig, batched_features, dataset_from_config, evaluate_backbone, load_dataset, \
    save_dataset, train_backbone, DATASET_FILE
from baseline import BaselineConfig, BaselineModels, baseline_records, run_baseline_sessions
from bench_analysis import (BASELINE_STREAM, HARQ_STREAM, HarqSummary, SweepGrid, baseline_summary,
                            eval_sweep, experiment_channels, gap_table, harq_cfg_for, harq_thetas,
                            load_harq_summaries, load_surface, pearson, report, run_cells, sample_indices,
                            worker_threads)
from checkpoints import ModelParams, load_checkpoint, save_checkpoint
from codec import CodecConfig, evaluate_codec, joint_finetune, train_codec
from db_connection import get_db_connection, results_db_path
from errors import CheckpointError, ConfigError, DivergenceError, SpikeHarqError, StatsError
from harq import HarqModels, transcript_records, transcripts_for_theta
from simnet import SimNetConfig, evaluate_simnet, train_simnet
from utils.config_loader import (apply_overrides, config_hash, dump_effective_config, get_config_value,
                                 load_config, validate_config)
from utils.logging_setup import setup_logging
from utils.results_schema import replace_rows

logger = logging.getLogger('spikeharq')

STAGE_FILES = {
    'train-backbone': 'backbone.ckpt',
    'train-codec': 'codec.ckpt',
    'finetune': 'finetune.ckpt',
    'train-simnet': 'simnet.ckpt',
    'baseline-codec': 'baseline_codec.ckpt',
}
TRAINING_STAGES = ('gen-data', 'train-backbone', 'train-codec', 'finetune', 'train-simnet')
EXPERIMENTS = ('sweep', 'harq', 'baseline', 'gaps', 'report')


@dataclass
class RunContext:
    config: dict
    seed: int
    checkpoint_dir: str
    data_dir: str
    results_db: str
    report_dir: str
    cfg_hash: bytes

    @classmethod
    def from_config(cls, config):
        return cls(config=config,
                   seed=get_config_value(config, 'experiment', 'seed', default=0),
                   checkpoint_dir=get_config_value(config, 'paths', 'checkpoints', default='checkpoints'),
                   data_dir=get_config_value(config, 'paths', 'data', default='data'),
                   results_db=results_db_path(config),
                   report_dir=get_config_value(config, 'paths', 'report_dir', default='results/report'),
                   cfg_hash=config_hash(config))

    def checkpoint(self, stage):
        return os.path.join(self.checkpoint_dir, STAGE_FILES[stage])

    def load(self, stage):
        return load_checkpoint(self.checkpoint(stage), self.cfg_hash)

    def save(self, stage, params):
        save_checkpoint(self.checkpoint(stage), params, self.cfg_hash)

    def optimizer(self):
        section = lambda key, default: get_config_value(self.config, 'optimizer', key, default=default)
        return dict(lr=section('lr', 1e-3), batch_size=section('batch_size', 64),
                    betas=(section('beta1', 0.9), section('beta2', 0.999)), eps=section('eps', 1e-8))

    def dataset(self):
        if not os.path.exists(os.path.join(self.data_dir, DATASET_FILE)):
            raise CheckpointError(os.path.join(self.data_dir, DATASET_FILE), "missing; run gen-data first")
        return load_dataset(self.data_dir)

    def harq_models(self):
        return HarqModels(params=self.load('train-simnet'), codec=CodecConfig.from_config(self.config),
                          simnet=SimNetConfig.from_config(self.config))


def cmd_gen_data(ctx: RunContext, args):
    dataset = dataset_from_config(ctx.config)
    save_dataset(dataset, ctx.data_dir)


def cmd_train_backbone(ctx: RunContext, args):
    dataset = ctx.dataset()
    opt = ctx.optimizer()
    params, test_acc = train_backbone(dataset, BackboneConfig.from_config(ctx.config), ctx.seed,
                                      epochs=get_config_value(ctx.config, 'backbone', 'epochs', default=10), **opt)
    logger.info(f"Backbone held-out accuracy {test_acc:.4f}")
    ctx.save('train-backbone', params)


def cmd_train_codec(ctx: RunContext, args):
    dataset = ctx.dataset()
    params = ctx.load('train-backbone')
    codec_cfg = CodecConfig.from_config(ctx.config)
    params, _ = train_codec(dataset, params, codec_cfg, ctx.seed,
                            epochs=get_config_value(ctx.config, 'codec', 'epochs', default=10), **ctx.optimizer())
    features = batched_features(dataset.test_x, params)
    noiseless = lambda start, stop: (lambda step, spikes: spikes)
    for t in (codec_cfg.t0, codec_cfg.T):
        acc = evaluate_codec(params, codec_cfg, features, dataset.test_y, t, noiseless)
        logger.info(f"Codec held-out accuracy at t={t}, p=0: {acc:.4f}")
    ctx.save('train-codec', params)


def cmd_finetune(ctx: RunContext, args):
    dataset = ctx.dataset()
    params = ctx.load('train-codec')
    opt = ctx.optimizer()
    opt['lr'] = get_config_value(ctx.config, 'codec', 'finetune_lr', default=2e-4)
    params, _ = joint_finetune(dataset, params, CodecConfig.from_config(ctx.config), ctx.seed,
                               epochs=get_config_value(ctx.config, 'codec', 'finetune_epochs', default=3), **opt)
    logger.info(f"Backbone accuracy after fine-tuning {evaluate_backbone(params, dataset.test_x, dataset.test_y):.4f}")
    ctx.save('finetune', params)


def cmd_train_simnet(ctx: RunContext, args):
    dataset = ctx.dataset()
    params = ctx.load('finetune')
    codec_cfg = CodecConfig.from_config(ctx.config)
    sim_cfg = SimNetConfig.from_config(ctx.config)
    params, _ = train_simnet(dataset, params, codec_cfg, sim_cfg, ctx.seed,
                             epochs=get_config_value(ctx.config, 'simnet', 'epochs', default=12), **ctx.optimizer())
    estimates, truths, _ = evaluate_simnet(params, codec_cfg, sim_cfg,
                                           batched_features(dataset.test_x, params), ctx.seed)
    mse = float(np.mean((estimates - truths) ** 2))
    try:
        logger.info(f"SimNet held-out MSE {mse:.5f}, Pearson r {pearson(estimates, truths):.4f}")
    except StatsError as e:
        logger.warning(f"SimNet held-out MSE {mse:.5f}; correlation undefined: {e}")
    ctx.save('train-simnet', params)


def cmd_sweep(ctx: RunContext, args):
    dataset = ctx.dataset()
    models = ctx.harq_models()
    grid = SweepGrid.from_config(ctx.config, models.codec)
    points = eval_sweep(models, grid, batched_features(dataset.test_x, models.params), dataset.test_y)
    with get_db_connection(ctx.results_db) as conn:
        replace_rows(conn, 'surface', [asdict(p) for p in points])
    best = max(points, key=lambda p: p.acc)
    logger.info(f"Sweep: {len(points)} surface points, best accuracy {best.acc:.4f} "
                f"at ber={best.ber}, bandwidth={best.bandwidth}")


def cmd_harq(ctx: RunContext, args):
    dataset = ctx.dataset()
    models = ctx.harq_models()
    bers = [float(p) for p in get_config_value(ctx.config, 'harq', 'gap_bers', default=[0.0])]
    seeds = get_config_value(ctx.config, 'sweep', 'seeds', default=[0])
    count = get_config_value(ctx.config, 'harq', 'samples', default=400)
    features = batched_features(dataset.test_x, models.params)
    cells = run_cells(models, features, bers, seeds, count, HARQ_STREAM, worker_threads())
    keys = sorted(cells)
    thetas = harq_thetas(ctx.config, np.concatenate([cells[k][1].scores.reshape(-1) for k in keys]))

    summaries, round_rows = [], []
    for theta in thetas:
        cfg = harq_cfg_for(models, theta)
        for bi, ber in enumerate(bers):
            sessions, labels = [], []
            for si in range(len(seeds)):
                indices, scores = cells[(bi, si)]
                sessions.extend(transcripts_for_theta(scores, cfg))
                labels.append(dataset.test_y[indices])
            summary = HarqSummary.from_sessions(theta, ber, sessions, np.concatenate(labels))
            summaries.append(summary)
            round_rows.extend(row for s in sessions for row in transcript_records(s))
            logger.info(f"HARQ theta={theta:.4f} ber={ber}: bandwidth {summary.bandwidth:.1f}, "
                        f"accuracy {summary.acc:.4f}, mean final t {summary.mean_final_t:.2f}")
    with get_db_connection(ctx.results_db) as conn:
        replace_rows(conn, 'harq_summary', [asdict(s) for s in summaries])
        replace_rows(conn, 'harq_rounds', round_rows)


def _baseline_models(ctx: RunContext, dataset):
    """Fixed-rate codec on top of the fine-tuned backbone; trained noise-free when its checkpoint is missing."""
    finetuned = ctx.load('finetune')
    codec_cfg = CodecConfig.from_config(ctx.config, fixed_rate=True)
    params = ModelParams()
    params.add(finetuned['mu'])
    params.add(finetuned['lambda'])
    path = ctx.checkpoint('baseline-codec')
    if os.path.exists(path):
        stored = load_checkpoint(path, ctx.cfg_hash)
        for tag in ('alpha', 'beta', 'gamma'):
            params.add(stored[tag])
    else:
        logger.info(f"No fixed-rate codec at {path}; training one at p = 0")
        train_codec(dataset, params, codec_cfg, ctx.seed,
                    epochs=get_config_value(ctx.config, 'baseline', 'epochs', default=10), **ctx.optimizer())
        codec_only = ModelParams()
        for tag in ('alpha', 'beta', 'gamma'):
            codec_only.add(params[tag])
        ctx.save('baseline-codec', codec_only)
    return BaselineModels(params=params, codec=codec_cfg)


def cmd_baseline(ctx: RunContext, args):
    dataset = ctx.dataset()
    models = _baseline_models(ctx, dataset)
    cfg = BaselineConfig.from_config(ctx.config)
    bers = [float(p) for p in get_config_value(ctx.config, 'baseline', 'bers', default=[0.0])]
    seeds = get_config_value(ctx.config, 'sweep', 'seeds', default=[0])
    count = get_config_value(ctx.config, 'baseline', 'samples', default=400)
    features = batched_features(dataset.test_x, models.params)

    rows, round_rows = [], []
    for bi, ber in enumerate(bers):
        sessions, labels = [], []
        for seed in seeds:
            indices = sample_indices(len(features), count, seed)
            channels = experiment_channels(ber, seed, BASELINE_STREAM + bi, len(indices))
            sessions.extend(run_baseline_sessions(features[indices], models, channels, cfg))
            labels.append(dataset.test_y[indices])
        row = baseline_summary(ber, sessions, np.concatenate(labels), cfg)
        rows.append(row)
        round_rows.extend(dict(ber=rec['ber'], session=rec['session'], step=rec['step'], bits=rec['bits'],
                               decision=rec['decision'])
                          for s in sessions for rec in baseline_records(s))
        logger.info(f"Baseline ber={ber}: accuracy {row['acc']:.4f}, CRC success {row['crc_success']:.3f}, "
                    f"bandwidth {row['bandwidth']:.1f}")
    with get_db_connection(ctx.results_db) as conn:
        replace_rows(conn, 'baseline', rows)
        replace_rows(conn, 'baseline_rounds', round_rows)


def cmd_gaps(ctx: RunContext, args):
    with get_db_connection(ctx.results_db) as conn:
        points = load_surface(conn)
        summaries = load_harq_summaries(conn)
        if not points or not summaries:
            raise StatsError("gaps need both the sweep surface and HARQ summaries; run sweep and harq first")
        rows = gap_table(summaries, points)
        replace_rows(conn, 'gaps', rows)
    worst = max(rows, key=lambda r: r['gap_pp'])
    logger.info(f"Largest gap {worst['gap_pp']:.3f} pp at theta={worst['theta']:.4f}, ber={worst['ber']}")


def cmd_report(ctx: RunContext, args):
    out_dir = args.out_dir or ctx.report_dir
    with get_db_connection(ctx.results_db) as conn:
        report(conn, out_dir)


COMMANDS = {
    'gen-data': (cmd_gen_data, "Generate the toy dataset"),
    'train-backbone': (cmd_train_backbone, "Train the split classifier (mu, lambda)"),
    'train-codec': (cmd_train_codec, "Train the multi-rate codec with the backbone frozen"),
    'finetune': (cmd_finetune, "Jointly fine-tune backbone and codec"),
    'train-simnet': (cmd_train_simnet, "Train SimNet with everything else frozen"),
    'sweep': (cmd_sweep, "Measure the manual-rate performance surface"),
    'harq': (cmd_harq, "Run HARQ sessions at calibrated thresholds"),
    'baseline': (cmd_baseline, "Run the CRC/FEC separate-coding baseline"),
    'gaps': (cmd_gaps, "Compare HARQ accuracy with the surface at equal bandwidth"),
    'report': (cmd_report, "Write CSV files from the results database"),
}


def cmd_pipeline(ctx: RunContext, args):
    stages = TRAINING_STAGES + (EXPERIMENTS if args.full else ())
    for stage in stages:
        logger.info(f"Pipeline stage {stage}")
        COMMANDS[stage][0](ctx, args)


def parse_arguments(argv=None):
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config-dir', help='Directory holding config.yaml (default: ./config)')
    common.add_argument('--set', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='Override a config value; may be repeated')
    common.add_argument('--seed', type=int, help='Override experiment.seed')

    parser = argparse.ArgumentParser(description='SpikeHARQ experiment runner')
    subparsers = parser.add_subparsers(dest='command', required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub = subparsers.add_parser(name, parents=[common], help=help_text)
        if name == 'report':
            sub.add_argument('--out-dir', help='Output directory (default: paths.report_dir)')
    pipeline = subparsers.add_parser('pipeline', parents=[common], help='Run every training stage in order')
    pipeline.add_argument('--full', action='store_true', help='Also run sweep, harq, baseline, gaps and report')
    pipeline.add_argument('--out-dir', help='Report directory for --full (default: paths.report_dir)')
    return parser.parse_args(argv)


def build_config(args):
    config = apply_overrides(load_config(args.config_dir), args.set)
    if args.seed is not None:
        config.setdefault('experiment', {})['seed'] = args.seed
    return validate_config(config)


def main(argv=None):
    args = parse_arguments(argv)
    try:
        config = build_config(args)
        setup_logging(config)
        logger.info(f"Effective configuration:\n{dump_effective_config(config)}")
        ctx = RunContext.from_config(config)
        handler = cmd_pipeline if args.command == 'pipeline' else COMMANDS[args.command][0]
        logger.info(f"Starting {args.command}")
        handler(ctx, args)
        logger.info(f"Finished {args.command}")
        return 0
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return 2
    except DivergenceError as e:
        logger.error(f"Training diverged: {e}")
        return 3
    except SpikeHarqError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
