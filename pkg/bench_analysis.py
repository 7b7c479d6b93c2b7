"""
Experiment analysis for the bench CLI.

eval_sweep measures the manual-rate performance surface (accuracy and mean
estimated similarity per BER and bandwidth). The HARQ helpers summarise
threshold-driven sessions, gap_table compares them with the surface at equal
bandwidth, and report turns the stored tables into CSV files.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from baseline import BaselineConfig, BaselineSession
from channel import ChannelModel
from codec import CodecConfig
from errors import ConfigError, ShapeError, StatsError
from harq import HarqConfig, HarqModels, HarqSession, SessionScores, bandwidth_of, run_sessions
from utils.config_loader import get_config_value
from utils.rng import PURPOSE_EVAL, name_tag, substream

logger = logging.getLogger(__name__)

THREADS_ENV = 'SPIKEHARQ_THREADS'
SESSION_STRIDE = 1_000_000
# Channel stream families, kept apart so the sweep, HARQ and baseline runs
# never share flip patterns.
SWEEP_STREAM = 1
HARQ_STREAM = 100
BASELINE_STREAM = 200

CSV_FLOAT_FORMAT = '%.6f'
# The surface table also stores true_sim; surface.csv keeps the fixed five columns.
SURFACE_TABLE_COLUMNS = ['ber', 'bandwidth', 'acc', 'sim', 'n', 'true_sim']
CSV_COLUMNS = {
    'surface': ['ber', 'bandwidth', 'acc', 'sim', 'n'],
    'harq': ['theta', 'ber', 'bandwidth', 'acc', 'mean_final_t', 'n'],
    'gaps': ['theta', 'ber', 'bandwidth', 'harq_acc', 'surface_acc', 'gap_pp'],
    'baseline': ['ber', 'bandwidth', 'acc', 'crc_success', 'n', 'fec'],
    'correlations': ['ber', 'pearson_r', 'n_points'],
}


@dataclass(frozen=True)
class SweepGrid:
    bers: Tuple[float, ...]
    ts: Tuple[int, ...]
    seeds: Tuple[int, ...]
    samples_per_cell: int

    def __post_init__(self):
        for name in ('bers', 'ts', 'seeds'):
            if not getattr(self, name):
                raise ConfigError(f"sweep.{name}", "axis must not be empty")
        if self.samples_per_cell < 1:
            raise ConfigError('sweep.samples_per_cell', f"need at least one sample, got {self.samples_per_cell}")

    @property
    def num_cells(self):
        return len(self.bers) * len(self.ts)

    def check_training_range(self, codec_cfg: CodecConfig):
        low, high = codec_cfg.ber_range
        outside = [p for p in self.bers if not low <= p <= high]
        if outside:
            logger.warning(f"Sweep BERs {outside} lie outside the training range {codec_cfg.ber_range}")

    @classmethod
    def from_config(cls, config, codec_cfg: CodecConfig):
        return cls(bers=tuple(float(p) for p in get_config_value(config, 'sweep', 'bers', default=[0.0])),
                   ts=tuple(codec_cfg.steps),
                   seeds=tuple(get_config_value(config, 'sweep', 'seeds', default=[0])),
                   samples_per_cell=get_config_value(config, 'sweep', 'samples_per_cell', default=400))


@dataclass(frozen=True)
class SurfacePoint:
    ber: float
    bandwidth: int
    acc: float
    sim: float
    n: int
    true_sim: float = float('nan')

    def __post_init__(self):
        if not 0.0 <= self.acc <= 1.0:
            raise StatsError(f"accuracy {self.acc} outside [0, 1]")
        if self.n < 1:
            raise StatsError(f"surface point at ber={self.ber}, bandwidth={self.bandwidth} has no samples")


@dataclass(frozen=True)
class HarqSummary:
    theta: float
    ber: float
    bandwidth: float
    acc: float
    mean_final_t: float
    n: int

    @classmethod
    def from_sessions(cls, theta, ber, sessions: Sequence[HarqSession], labels):
        labels = np.asarray(labels)
        if len(sessions) != len(labels):
            raise ShapeError('harq_summary', (len(sessions),), labels.shape)
        return cls(theta=float(theta), ber=float(ber),
                   bandwidth=float(np.mean([bandwidth_of(s) for s in sessions])),
                   acc=float(np.mean(np.array([s.final_prediction for s in sessions]) == labels)),
                   mean_final_t=float(np.mean([s.final_t for s in sessions])),
                   n=len(sessions))


def worker_threads():
    """Thread count for sweep cells from SPIKEHARQ_THREADS (a .env file is honoured)."""
    load_dotenv()
    raw = os.getenv(THREADS_ENV, '1')
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(THREADS_ENV, f"expected an integer, got {raw!r}")
    if threads < 1:
        raise ConfigError(THREADS_ENV, f"need at least one thread, got {threads}")
    return threads


def sample_indices(num_available, count, seed):
    """The first `count` entries of a seed-specific permutation, so smaller draws are prefixes of larger ones."""
    order = substream(PURPOSE_EVAL, seed, name_tag('eval-samples')).permutation(num_available)
    return order[:min(count, num_available)]


def experiment_channels(ber, seed, stream, count):
    return [ChannelModel(ber, seed=seed, session=stream * SESSION_STRIDE + i) for i in range(count)]


def run_cells(models: HarqModels, features, bers, seeds, count, stream_base, threads=1) -> Dict[Tuple[int, int], Tuple[np.ndarray, SessionScores]]:
    """
    Run every (BER, seed) cell to T steps. Returns {(ber index, seed index):
    (sample indices, scores)}; the keys do not depend on completion order.
    """
    def job(key):
        bi, si = key
        indices = sample_indices(len(features), count, seeds[si])
        channels = experiment_channels(bers[bi], seeds[si], stream_base + bi, len(indices))
        return key, (indices, run_sessions(features[indices], models, channels))

    keys = [(bi, si) for bi in range(len(bers)) for si in range(len(seeds))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return dict(pool.map(job, keys))


def eval_sweep(models: HarqModels, grid: SweepGrid, features, labels, threads=None) -> List[SurfacePoint]:
    """Manual-rate surface: one SurfacePoint per (BER, t), pooled over the grid's seeds."""
    codec_cfg = models.codec
    bad = [t for t in grid.ts if t not in codec_cfg.steps]
    if bad:
        raise ConfigError('sweep.ts', f"steps {bad} outside [{codec_cfg.t0}, {codec_cfg.T}]")
    grid.check_training_range(codec_cfg)
    threads = threads or worker_threads()
    labels = np.asarray(labels)
    logger.info(f"Sweep: {len(grid.bers)} BERs x {len(grid.ts)} steps x {len(grid.seeds)} seeds, "
                f"{grid.samples_per_cell} samples per cell, {threads} thread(s)")
    cells = run_cells(models, features, grid.bers, grid.seeds, grid.samples_per_cell, SWEEP_STREAM, threads)

    points = []
    for bi, ber in enumerate(grid.bers):
        parts = [cells[(bi, si)] for si in range(len(grid.seeds))]
        for t in grid.ts:
            col = t - codec_cfg.t0
            correct = np.concatenate([s.predictions[:, col] == labels[idx] for idx, s in parts])
            sims = np.concatenate([s.scores[:, col] for _, s in parts])
            truths = np.concatenate([s.true_scores[:, col] for _, s in parts])
            points.append(SurfacePoint(ber=float(ber), bandwidth=models.simnet.prior_bits + t * codec_cfg.step_bits,
                                       acc=float(np.mean(correct)), sim=float(np.mean(sims)), n=len(correct),
                                       true_sim=float(np.mean(truths))))
    return points


def pearson(xs, ys) -> float:
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    if xs.shape != ys.shape:
        raise ShapeError('pearson', xs.shape, ys.shape)
    if len(xs) < 2:
        raise StatsError(f"Pearson correlation needs at least two points, got {len(xs)}")
    if np.ptp(xs) == 0.0 or np.ptp(ys) == 0.0:
        raise StatsError("Pearson correlation of a zero-variance series is undefined")
    return float(np.clip(np.corrcoef(xs, ys)[0, 1], -1.0, 1.0))


def surface_frame(points: Sequence[SurfacePoint]) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(p) for p in points], columns=SURFACE_TABLE_COLUMNS)
    return frame.sort_values(['ber', 'bandwidth'], kind='mergesort').reset_index(drop=True)


def correlations(points: Sequence[SurfacePoint]):
    """Per BER row: Pearson r between mean estimated similarity and accuracy across bandwidths."""
    rows = []
    for ber, group in surface_frame(points).groupby('ber', sort=True):
        try:
            r = pearson(group['sim'], group['acc'])
        except StatsError as e:
            logger.warning(f"Correlation at ber={ber}: {e}")
            r = float('nan')
        rows.append(dict(ber=float(ber), pearson_r=r, n_points=len(group)))
    return rows


def interpolate_surface(points: Sequence[SurfacePoint], bandwidth, ber, value='acc') -> float:
    """Bilinear interpolation of the surface over (ber, bandwidth)."""
    grid = surface_frame(points).pivot_table(index='ber', columns='bandwidth', values=value, aggfunc='mean')
    grid = grid.sort_index().sort_index(axis=1)
    if grid.empty or grid.isna().values.any():
        raise StatsError("performance surface is not a complete grid")
    bers = grid.index.to_numpy(dtype=np.float64)
    bandwidths = grid.columns.to_numpy(dtype=np.float64)
    if not (bers[0] <= ber <= bers[-1] and bandwidths[0] <= bandwidth <= bandwidths[-1]):
        raise StatsError(f"query (ber={ber}, bandwidth={bandwidth}) outside the grid "
                         f"[{bers[0]}, {bers[-1]}] x [{bandwidths[0]}, {bandwidths[-1]}]")
    per_row = np.array([np.interp(bandwidth, bandwidths, row) for row in grid.to_numpy()])
    return float(np.interp(ber, bers, per_row))


def calibrate_thetas(estimates, quantiles) -> List[float]:
    """Thresholds at the given quantiles of the estimated-similarity distribution."""
    estimates = np.asarray(estimates, dtype=np.float64).reshape(-1)
    if not len(estimates):
        raise StatsError("no similarity estimates to calibrate thresholds from")
    return [float(np.clip(q, -1.0, 1.0)) for q in np.quantile(estimates, quantiles)]


def harq_thetas(config, calibration_scores):
    """Explicit harq.thetas when configured, otherwise quantile calibration."""
    explicit = get_config_value(config, 'harq', 'thetas', default=[]) or []
    if explicit:
        logger.info(f"Using configured thresholds {explicit}")
        return [float(t) for t in explicit]
    quantiles = get_config_value(config, 'harq', 'theta_quantiles', default=[0.4, 0.5, 0.6])
    thetas = list(dict.fromkeys(calibrate_thetas(calibration_scores, quantiles)))
    if len(thetas) < len(quantiles):
        logger.warning(f"Quantiles {quantiles} collapse to {len(thetas)} distinct threshold(s)")
    logger.info(f"Calibrated thresholds {', '.join(f'{t:.4f}' for t in thetas)} at quantiles {quantiles}")
    return thetas


def harq_cfg_for(models: HarqModels, theta) -> HarqConfig:
    return HarqConfig(t0=models.codec.t0, T=models.codec.T, theta=float(theta),
                      step_bits=models.codec.step_bits, prior_bits=models.simnet.prior_bits)


def gap_table(summaries: Sequence[HarqSummary], points: Sequence[SurfacePoint]):
    """|accuracy(HARQ) - surface accuracy at the same mean bandwidth|, in percentage points."""
    rows = []
    for s in sorted(summaries, key=lambda s: (s.theta, s.ber)):
        reference = interpolate_surface(points, s.bandwidth, s.ber)
        rows.append(dict(theta=s.theta, ber=s.ber, bandwidth=s.bandwidth, harq_acc=s.acc,
                         surface_acc=reference, gap_pp=abs(s.acc - reference) * 100.0))
    return rows


def baseline_summary(ber, sessions: Sequence[BaselineSession], labels, cfg: BaselineConfig):
    labels = np.asarray(labels)
    return dict(ber=float(ber), bandwidth=float(np.mean([s.total_bits for s in sessions])),
                acc=float(np.mean(np.array([s.final_prediction for s in sessions]) == labels)),
                crc_success=float(np.mean([s.success for s in sessions])), n=len(sessions), fec=cfg.fec.kind)


def _read_table(conn, table, columns, order):
    frame = pd.read_sql_query(f"SELECT {', '.join(columns)} FROM {table}", conn)
    return frame.sort_values(order, kind='mergesort').reset_index(drop=True)


def points_from_frame(frame: pd.DataFrame) -> List[SurfacePoint]:
    return [SurfacePoint(ber=float(r.ber), bandwidth=int(r.bandwidth), acc=float(r.acc), sim=float(r.sim),
                         n=int(r.n), true_sim=float(r.true_sim) if pd.notna(r.true_sim) else float('nan'))
            for r in frame.itertuples(index=False)]


def summaries_from_frame(frame: pd.DataFrame) -> List[HarqSummary]:
    return [HarqSummary(theta=float(r.theta), ber=float(r.ber), bandwidth=float(r.bandwidth), acc=float(r.acc),
                        mean_final_t=float(r.mean_final_t), n=int(r.n))
            for r in frame.itertuples(index=False)]


def load_surface(conn) -> List[SurfacePoint]:
    return points_from_frame(_read_table(conn, 'surface', SURFACE_TABLE_COLUMNS, ['ber', 'bandwidth']))


def load_harq_summaries(conn) -> List[HarqSummary]:
    return summaries_from_frame(_read_table(conn, 'harq_summary', CSV_COLUMNS['harq'], ['theta', 'ber']))


def _write_csv(frame, out_dir, name):
    path = os.path.join(out_dir, f"{name}.csv")
    frame[CSV_COLUMNS[name]].to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, na_rep='nan',
                                    lineterminator='\n')
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def acceptance_metrics(surface: pd.DataFrame, corr: pd.DataFrame, gaps: pd.DataFrame, baseline: pd.DataFrame):
    """Headline numbers derivable from the stored tables; missing inputs give nan."""
    nan = float('nan')
    metrics = dict(min_pearson_r=float(corr['pearson_r'].min()) if len(corr) else nan,
                   max_gap_pp=float(gaps['gap_pp'].max()) if len(gaps) else nan,
                   baseline_drop_pp=nan, semantic_drop_pp=nan)
    if len(baseline):
        ordered = baseline.sort_values('ber', kind='mergesort')
        metrics['baseline_drop_pp'] = float(ordered['acc'].iloc[0] - ordered['acc'].iloc[-1]) * 100.0
    if len(surface):
        top = surface[surface['bandwidth'] == surface['bandwidth'].max()].sort_values('ber', kind='mergesort')
        if len(baseline):
            top = top[(top['ber'] >= baseline['ber'].min()) & (top['ber'] <= baseline['ber'].max())]
        if len(top):
            metrics['semantic_drop_pp'] = float(top['acc'].iloc[0] - top['acc'].iloc[-1]) * 100.0
    return metrics


def report(conn, out_dir):
    """Write surface, harq, gaps, baseline and correlations CSVs; returns (paths, acceptance metrics)."""
    os.makedirs(out_dir, exist_ok=True)
    surface = _read_table(conn, 'surface', SURFACE_TABLE_COLUMNS, ['ber', 'bandwidth'])
    harq = _read_table(conn, 'harq_summary', CSV_COLUMNS['harq'], ['theta', 'ber'])
    gaps = _read_table(conn, 'gaps', CSV_COLUMNS['gaps'], ['theta', 'ber'])
    baseline = _read_table(conn, 'baseline', CSV_COLUMNS['baseline'], ['ber'])
    corr = pd.DataFrame(correlations(points_from_frame(surface)) if len(surface) else [],
                        columns=CSV_COLUMNS['correlations'])

    paths = [_write_csv(frame, out_dir, name) for name, frame in
             (('surface', surface), ('harq', harq), ('gaps', gaps), ('baseline', baseline), ('correlations', corr))]
    metrics = acceptance_metrics(surface, corr, gaps, baseline)
    logger.info("Acceptance summary: " + ', '.join(f"{k}={v:.3f}" for k, v in metrics.items()))
    return paths, metrics
