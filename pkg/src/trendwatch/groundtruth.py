"""Consensus ground-truth intervals from penalized-smoother runs.

A date belongs to an increasing interval only when every smoothing
configuration in the grid agrees that the latent trend is growing there;
maximal unanimous runs shorter than ``min_duration`` are dropped as noise.
The complementary dates where every configuration shows non-positive growth
form the null set used for alarm-threshold calibration.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .panel import StreamPanel, format_date, parse_date
from .smoother import SmoothConfig, growth_series, panel_matrix, smooth_multivariate

DEFAULT_LAMBDA_GRID = {"l1": (1000.0, 10000.0, 100000.0), "l2": (10.0, 1000.0, 30000.0)}
MIN_DURATION = 7
SIGNAL_FLOOR = 100.0


@dataclass(frozen=True)
class TrendInterval:
    """A maximal span of consensus-increasing dates, inclusive on both ends."""

    region_id: str
    start: int
    end: int
    label: str = "increasing"

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"interval start after end: {self.start} > {self.end}")

    @property
    def duration(self) -> int:
        return self.end - self.start + 1

    def contains(self, date: int) -> bool:
        return self.start <= date <= self.end


@dataclass(frozen=True)
class TrendIntervalSet:
    intervals: dict[str, tuple[TrendInterval, ...]]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for region, ivs in self.intervals.items():
            for prev, cur in zip(ivs, ivs[1:]):
                if cur.start <= prev.end:
                    raise ValueError(f"overlapping intervals for {region}")

    @property
    def regions(self) -> list[str]:
        return sorted(self.intervals)

    def for_region(self, region: str) -> tuple[TrendInterval, ...]:
        return self.intervals.get(region, ())

    def total(self) -> int:
        return sum(len(v) for v in self.intervals.values())

    def covers(self, region: str, date: int) -> bool:
        return any(iv.contains(date) for iv in self.for_region(region))


def positive_runs(mask: np.ndarray, dates: np.ndarray, min_duration: int) -> list[tuple[int, int]]:
    """Maximal True runs of at least min_duration days, as (start, end) dates."""
    runs = []
    i = 0
    n = len(mask)
    while i < n:
        if mask[i]:
            j = i
            while j < n and mask[j]:
                j += 1
            if j - i >= min_duration:
                runs.append((int(dates[i]), int(dates[j - 1])))
            i = j
        else:
            i += 1
    return runs


def consensus_trends(
    region_id: str,
    dates: np.ndarray,
    growth_sets: list[np.ndarray],
    min_duration: int = MIN_DURATION,
    eps: float = 0.0,
) -> tuple[list[TrendInterval], list[TrendInterval]]:
    """Intersect per-config growth signs into increasing and null intervals.

    ``dates`` indexes the growth values: growth_sets[k][t] is the change from
    dates[t] to dates[t]+1, so a positive value marks both endpoints as
    growing. Returns (increasing intervals, consensus-null intervals); null
    dates are those where every config shows growth <= eps.
    """
    if len(growth_sets) < 2:
        raise DataError("consensus requires at least two smoothing configs")
    for g in growth_sets:
        if len(g) != len(dates):
            raise DataError("growth series do not share a date axis")
    G = np.vstack(growth_sets)
    up = np.all(G > eps, axis=0)
    down = np.all(G <= eps, axis=0)
    # a growth value spans (t, t+1); mark day-level masks over len+1 days
    day_dates = np.concatenate([dates, [dates[-1] + 1]])
    up_days = np.zeros(len(day_dates), dtype=bool)
    up_days[:-1] |= up
    up_days[1:] |= up
    down_days = np.zeros(len(day_dates), dtype=bool)
    down_days[:-1] |= down
    down_days[1:] |= down
    down_days &= ~up_days
    increasing = [
        TrendInterval(region_id, s, e)
        for s, e in positive_runs(up_days, day_dates, min_duration)
    ]
    null = [
        TrendInterval(region_id, s, e, label="null")
        for s, e in positive_runs(down_days, day_dates, 1)
    ]
    return increasing, null


@dataclass(frozen=True)
class GroundTruthResult:
    increasing: TrendIntervalSet
    null: TrendIntervalSet
    excluded: dict[str, str]


def build_ground_truth(
    panel: StreamPanel,
    gt_streams: list[str],
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID["l1"],
    penalty: str = "l1",
    min_duration: int = MIN_DURATION,
    eps: float = 0.0,
    signal_floor: float = SIGNAL_FLOOR,
    per_stream: bool = False,
    regions: list[str] | None = None,
    jobs: int = 1,
) -> GroundTruthResult:
    """Consensus intervals per region from the multivariate smoother.

    Each region is smoothed once per lambda in the grid over the given
    streams; the shared latent trend's growth series feeds consensus_trends
    (or each stream's own growth when per_stream is set). Regions where any
    stream's total falls below signal_floor are excluded with a reason, as
    are regions where the smoother fails.
    """
    if len(lambda_grid) < 2:
        raise DataError("lambda grid needs at least two values for a consensus")
    regions = regions if regions is not None else panel.regions
    models = ["poisson" if panel.stream_kind(s) == "count" else "lognormal" for s in gt_streams]
    jobs = max(1, jobs)

    job = (gt_streams, models, lambda_grid, penalty, min_duration, eps, signal_floor, per_stream)
    if jobs > 1 and len(regions) > 1:
        from concurrent.futures import ProcessPoolExecutor
        from multiprocessing import get_context

        with ProcessPoolExecutor(
            jobs, mp_context=get_context("fork"), initializer=_set_worker_panel, initargs=(panel,)
        ) as pool:
            results = list(pool.map(_region_consensus, [(None, region, job) for region in regions]))
    else:
        results = [_region_consensus((panel, region, job)) for region in regions]

    increasing: dict[str, tuple[TrendInterval, ...]] = {}
    null: dict[str, tuple[TrendInterval, ...]] = {}
    excluded: dict[str, str] = {}
    for region, outcome in zip(regions, results):
        kind, payload = outcome
        if kind == "excluded":
            excluded[region] = payload
        else:
            ups, downs = payload
            increasing[region] = tuple(ups)
            null[region] = tuple(downs)
    provenance = {
        "lambda_grid": list(lambda_grid),
        "penalty": penalty,
        "streams": list(gt_streams),
        "models": models,
        "min_duration": min_duration,
        "eps": eps,
        "per_stream": per_stream,
    }
    return GroundTruthResult(
        TrendIntervalSet(increasing, provenance),
        TrendIntervalSet(null, provenance),
        excluded,
    )


_WORKER_PANEL: StreamPanel | None = None


def _set_worker_panel(panel: StreamPanel) -> None:
    global _WORKER_PANEL
    _WORKER_PANEL = panel


def _region_consensus(args):
    panel, region, job = args
    streams, models, lambda_grid, penalty, min_duration, eps, floor, per_stream = job
    if panel is None:
        panel = _WORKER_PANEL
    try:
        dates, Y = panel_matrix(panel, region, streams)
    except DataError as exc:
        return ("excluded", f"panel error: {exc}")
    totals = Y.sum(axis=1)
    if np.any(totals < floor):
        weak = streams[int(np.argmin(totals))]
        return ("excluded", f"stream {weak} total {totals.min():.0f} below floor {floor:.0f}")
    growth_sets = []
    for lam in lambda_grid:
        config = SmoothConfig(lam=lam, penalty=penalty)
        try:
            if per_stream:
                for s in range(Y.shape[0]):
                    result = smooth_multivariate(dates, Y[s : s + 1], config, models=[models[s]])
                    growth_sets.append(growth_series(result.log_phi))
            else:
                result = smooth_multivariate(dates, Y, config, models=models)
                growth_sets.append(growth_series(result.log_phi))
        except (DataError, FloatingPointError) as exc:
            return ("excluded", f"smoother failed at lambda={lam:g}: {exc}")
    ups, downs = consensus_trends(region, dates[:-1], growth_sets, min_duration, eps)
    return ("ok", (ups, downs))


def complement_intervals(truth: TrendIntervalSet, date_range: tuple[int, int]) -> TrendIntervalSet:
    """Maximal spans of date_range not covered by any truth interval."""
    lo, hi = date_range
    out: dict[str, tuple[TrendInterval, ...]] = {}
    for region in truth.regions:
        gaps = []
        cursor = lo
        for iv in sorted(truth.for_region(region), key=lambda iv: iv.start):
            if iv.start > cursor:
                gaps.append(TrendInterval(region, cursor, iv.start - 1, label="null"))
            cursor = max(cursor, iv.end + 1)
        if cursor <= hi:
            gaps.append(TrendInterval(region, cursor, hi, label="null"))
        out[region] = tuple(gaps)
    return TrendIntervalSet(out, {"complement_of": dict(truth.provenance)})


def write_intervals_csv(path: str, interval_set: TrendIntervalSet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region_id", "start", "end"])
        for region in interval_set.regions:
            for iv in interval_set.for_region(region):
                writer.writerow([region, format_date(iv.start), format_date(iv.end)])


def load_intervals_csv(path: str, label: str = "increasing") -> TrendIntervalSet:
    intervals: dict[str, list[TrendInterval]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"region_id", "start", "end"}:
            raise DataError(f"{path}: expected columns region_id,start,end")
        for row in reader:
            intervals.setdefault(row["region_id"], []).append(
                TrendInterval(row["region_id"], parse_date(row["start"]), parse_date(row["end"]), label)
            )
    return TrendIntervalSet({r: tuple(sorted(v, key=lambda iv: iv.start)) for r, v in intervals.items()})
