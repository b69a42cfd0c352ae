"""Threshold calibration, alarms, and power/delay scoring.

Thresholds are empirical quantiles of the per-date detection statistic over
consensus-null dates; alarms fire strictly above the threshold; a
ground-truth interval counts as detected when an alarm lands between its
start and start + max_delay (capped at the interval end), with undetected
intervals charged the maximum delay.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .groundtruth import TrendIntervalSet
from .localreg import FitSeries, corrected_log, rolling_fit
from .panel import StreamPanel, format_date

MIN_NULL_STATS = 100


@dataclass(frozen=True)
class DetectionConfig:
    fpr_target: float = 0.05
    window_sizes: tuple[int, ...] = (7, 14, 21, 28, 35)
    max_delay: int = 60
    calibration_scope: str = "pooled"

    def __post_init__(self):
        if not 0.0 < self.fpr_target < 1.0:
            raise ValueError("fpr_target must be in (0, 1)")
        if any(w < 3 for w in self.window_sizes):
            raise ValueError("window sizes must be at least 3")
        if self.calibration_scope not in ("pooled", "per_region"):
            raise ValueError(f"unknown calibration scope: {self.calibration_scope}")


@dataclass(frozen=True)
class IntervalRecord:
    region_id: str
    start: int
    end: int
    detected: bool
    delay: int
    first_alarm: int | None


@dataclass(frozen=True)
class EvalReport:
    power: float  # percent of intervals detected
    mean_delay: float
    records: tuple[IntervalRecord, ...]
    realized_fpr: float
    threshold: float | dict[str, float]
    n_null_dates: int = 0

    def to_dict(self) -> dict:
        return {
            "power": self.power,
            "mean_delay": self.mean_delay,
            "realized_fpr": self.realized_fpr,
            "threshold": self.threshold,
            "n_null_dates": self.n_null_dates,
            "records": [
                {
                    "region_id": r.region_id,
                    "start": format_date(r.start),
                    "end": format_date(r.end),
                    "detected": r.detected,
                    "delay": r.delay,
                    "first_alarm": format_date(r.first_alarm) if r.first_alarm is not None else None,
                }
                for r in self.records
            ],
        }


def null_dates_of(stat_series: dict[int, float], null_set: TrendIntervalSet, region: str) -> list[int]:
    return [d for d in stat_series if null_set.covers(region, d)]


def calibrate_threshold(null_stats: np.ndarray, fpr_target: float) -> float:
    """Smallest observed null statistic exceeded by at most fpr_target of them.

    With null stats {1..100} and 5% target this returns 95: exactly 5 values
    lie strictly above, so strict-inequality alarms realize the target rate.
    """
    stats = np.sort(np.asarray(null_stats, dtype=float))
    n = len(stats)
    if n < MIN_NULL_STATS:
        raise DataError(f"need at least {MIN_NULL_STATS} null statistics, got {n}")
    allowed = fpr_target * n
    pos = max(int(math.ceil(n - allowed)) - 1, 0)
    # ties: move up to the last equal value so the strict count stays within budget
    threshold = stats[pos]
    while pos + 1 < n and np.count_nonzero(stats > threshold) > allowed:
        pos += 1
        threshold = stats[pos]
    return float(threshold)


def emit_alarms(stat_series: dict[int, float], threshold: float) -> list[int]:
    """Sorted dates whose statistic strictly exceeds the threshold."""
    return sorted(d for d, s in stat_series.items() if s > threshold)


def calibrate(
    stats_by_region: dict[str, dict[int, float]],
    null_set: TrendIntervalSet,
    config: DetectionConfig,
) -> float | dict[str, float]:
    """Pooled threshold across regions, or one per region under per_region."""
    if config.calibration_scope == "per_region":
        return {
            region: calibrate_threshold(
                np.array(
                    [stats[d] for d in null_dates_of(stats, null_set, region)]
                ),
                config.fpr_target,
            )
            for region, stats in stats_by_region.items()
        }
    pooled = [
        stats[d]
        for region, stats in stats_by_region.items()
        for d in null_dates_of(stats, null_set, region)
    ]
    return calibrate_threshold(np.array(pooled), config.fpr_target)


def alarms_by_region(
    stats_by_region: dict[str, dict[int, float]], threshold: float | dict[str, float]
) -> dict[str, list[int]]:
    return {
        region: emit_alarms(stats, threshold[region] if isinstance(threshold, dict) else threshold)
        for region, stats in stats_by_region.items()
    }


def score_power_delay(
    alarms: dict[str, list[int]],
    truth: TrendIntervalSet,
    null_set: TrendIntervalSet,
    max_delay: int = 60,
    threshold: float | dict[str, float] = float("nan"),
    stats_by_region: dict[str, dict[int, float]] | None = None,
) -> EvalReport:
    """Score alarms against ground truth.

    An interval [s, e] is detected iff an alarm falls in [s, min(e, s +
    max_delay)]; its delay is first alarm minus s, else max_delay. Realized
    FPR is the fraction of null dates carrying an alarm, computed over the
    dates that actually have a statistic when stats_by_region is given.
    """
    if truth.total() == 0:
        raise DataError("ground truth has no intervals to score")
    records = []
    for region in truth.regions:
        region_alarms = alarms.get(region, [])
        for iv in truth.for_region(region):
            cutoff = min(iv.end, iv.start + max_delay)
            hits = [a for a in region_alarms if iv.start <= a <= cutoff]
            if hits:
                records.append(
                    IntervalRecord(region, iv.start, iv.end, True, hits[0] - iv.start, hits[0])
                )
            else:
                records.append(IntervalRecord(region, iv.start, iv.end, False, max_delay, None))
    n_null = n_false = 0
    for region in null_set.regions:
        alarm_set = set(alarms.get(region, []))
        if stats_by_region is not None:
            dates = null_dates_of(stats_by_region.get(region, {}), null_set, region)
        else:
            dates = [
                d for iv in null_set.for_region(region) for d in range(iv.start, iv.end + 1)
            ]
        n_null += len(dates)
        n_false += sum(1 for d in dates if d in alarm_set)
    power = 100.0 * sum(r.detected for r in records) / len(records)
    mean_delay = float(np.mean([r.delay for r in records]))
    fpr = n_false / n_null if n_null else float("nan")
    return EvalReport(power, mean_delay, tuple(records), fpr, threshold, n_null)


def moving_average_stat(dates: np.ndarray, values: np.ndarray, n: int) -> dict[int, float]:
    """log MA_n(t) - log MA_n(t-1): the smoother-baseline detection statistic.

    Requires consecutive dates; the first n-1 dates have no statistic. Zeros
    are handled by the same whole-series +0.5 correction as the local
    regressions.
    """
    if n < 2:
        raise ValueError("moving-average window must be at least 2")
    values = np.asarray(values, dtype=float)
    if len(values) < n + 1:
        raise DataError(f"need at least {n + 1} observations for MA({n})")
    if np.any(np.diff(dates) != 1):
        raise DataError("moving-average statistic requires consecutive dates")
    kernel = np.ones(n) / n
    ma = np.convolve(values, kernel, mode="valid")  # ma[i] covers dates[i..i+n-1]
    log_ma = corrected_log(ma)
    diffs = np.diff(log_ma)
    return {int(d): float(v) for d, v in zip(dates[n:], diffs)}


def detector_stats(
    panel: StreamPanel,
    streams: list[str],
    window: int,
    model: str = "linear_log",
    fuse: bool = False,
    graph=None,
    include_self: bool = False,
    ma_baseline: bool = False,
    regions: list[str] | None = None,
    jobs: int = 1,
) -> dict[str, dict[int, float]]:
    """Per-region, per-date z statistics for one detector configuration.

    Single stream by default; fuse combines the streams' p-values per date;
    graph (a NeighborGraph) averages the first stream's growth estimates over
    learned neighbors; ma_baseline replaces local regression with the
    moving-average statistic on the first stream.
    """
    from .fusion import fuse_region

    regions = regions if regions is not None else panel.regions
    if ma_baseline:
        out = {}
        for region in regions:
            dates, values = panel.series(region, streams[0])
            out[region] = moving_average_stat(dates, values, window)
        return out

    def z_of(fs: FitSeries) -> dict[int, float]:
        return {d: fs.fits[d].z_score for d in fs.fits if fs.fits[d].converged}

    fit_sets: dict[str, dict[str, FitSeries]] = {}
    jobs = max(1, jobs)
    tasks = [(region, stream) for region in regions for stream in streams]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor
        from multiprocessing import get_context

        with ProcessPoolExecutor(
            jobs, mp_context=get_context("fork"), initializer=_set_worker_fit, initargs=(panel, window, model)
        ) as pool:
            fit_list = list(pool.map(_fit_task, tasks))
    else:
        _set_worker_fit(panel, window, model)
        fit_list = [_fit_task(t) for t in tasks]
    for (region, stream), fs in zip(tasks, fit_list):
        fit_sets.setdefault(region, {})[stream] = fs

    stats: dict[str, dict[int, float]] = {}
    if fuse:
        for region in regions:
            fused = fuse_region(list(fit_sets[region].values()))
            stats[region] = dict(fused.combined_z)
        return stats
    if graph is not None:
        from .network import aggregate_growth

        per_region = {region: fit_sets[region][streams[0]] for region in regions}
        aggregated = aggregate_growth(per_region, graph, include_self=include_self)
        return {region: z_of(fs) for region, fs in aggregated.items()}
    return {region: z_of(fit_sets[region][streams[0]]) for region in regions}


_FIT_CTX: tuple = ()


def _set_worker_fit(panel, window, model):
    global _FIT_CTX
    _FIT_CTX = (panel, window, model)


def _fit_task(task):
    region, stream = task
    panel, window, model = _FIT_CTX
    return rolling_fit(panel, region, stream, window, model)


@dataclass(frozen=True)
class SweepRow:
    window: int
    power: float
    mean_delay: float
    realized_fpr: float


def window_sweep(
    panel: StreamPanel,
    streams: list[str],
    truth: TrendIntervalSet,
    null_set: TrendIntervalSet,
    config: DetectionConfig,
    model: str = "linear_log",
    fuse: bool = False,
    graph=None,
    include_self: bool = False,
    ma_baseline: bool = False,
    jobs: int = 1,
) -> list[SweepRow]:
    """Full calibrate-alarm-score pipeline once per window size."""
    rows = []
    for window in config.window_sizes:
        try:
            stats = detector_stats(
                panel, streams, window, model, fuse=fuse, graph=graph,
                include_self=include_self, ma_baseline=ma_baseline, jobs=jobs,
            )
            threshold = calibrate(stats, null_set, config)
            alarms = alarms_by_region(stats, threshold)
            report = score_power_delay(
                alarms, truth, null_set, config.max_delay, threshold, stats
            )
        except DataError:
            rows.append(SweepRow(window, float("nan"), float("nan"), float("nan")))
            continue
        rows.append(SweepRow(window, report.power, report.mean_delay, report.realized_fpr))
    return rows


def write_sweep_csv(path: str, rows: list[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window", "power", "mean_delay", "realized_fpr"])
        for row in rows:
            writer.writerow([row.window, repr(row.power), repr(row.mean_delay), repr(row.realized_fpr)])


def write_report_json(path: str, report: EvalReport) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_alarms_csv(path: str, alarms: dict[str, list[int]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region_id", "date"])
        for region in sorted(alarms):
            for date in alarms[region]:
                writer.writerow([region, format_date(date)])
