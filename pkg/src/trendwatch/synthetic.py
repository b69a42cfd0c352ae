"""Reproducible synthetic multi-region, multi-stream count panels.

Each region's latent log-level is a continuous piecewise-linear path:
planted waves rise at a fixed daily rate, flanked by short steep declines at
the same rate, with a gentle decay connecting waves. Every wave boundary is
therefore a sign change of the latent growth rate, which keeps the planted
interval endpoints localizable by the retrospective smoother. Counts are
negative-binomial around the latent mean with per-stream scale and
dispersion multipliers and a shared multiplicative weekday pattern.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .groundtruth import TrendInterval, TrendIntervalSet
from .panel import RegionMeta, StreamPanel

EDGE_DIP_DAYS = 12  # steep decline flanking each wave, at the wave's own rate
SHALLOW_DECAY = 0.006  # log-level decay per day between waves
DEFAULT_START_DATE = 737791  # 2021-01-01


@dataclass(frozen=True)
class Wave:
    start: int  # day offset within the panel
    duration: int
    rate: float

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("wave duration must be positive")
        if self.rate <= 0:
            raise ValueError("planted waves must have positive growth rate")

    @property
    def end(self) -> int:
        return self.start + self.duration


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int
    n_regions: int
    n_streams: int
    n_days: int
    baseline_mu: tuple[float, ...]  # per region
    waves: tuple[tuple[Wave, ...], ...]  # per region
    weekday_alpha: tuple[float, ...]  # 7-vector, sums to zero
    dispersion_c: float
    cluster_of: tuple[int, ...]  # per region
    stream_scales: tuple[float, ...] = (1.0,)
    stream_noise_multipliers: tuple[float, ...] = (1.0,)
    start_date: int = DEFAULT_START_DATE

    def __post_init__(self):
        if len(self.baseline_mu) != self.n_regions or len(self.waves) != self.n_regions:
            raise ValueError("per-region fields must have n_regions entries")
        if len(self.cluster_of) != self.n_regions:
            raise ValueError("cluster_of must have n_regions entries")
        if len(self.stream_scales) != self.n_streams or len(self.stream_noise_multipliers) != self.n_streams:
            raise ValueError("per-stream fields must have n_streams entries")
        if len(self.weekday_alpha) != 7 or abs(sum(self.weekday_alpha)) > 1e-9:
            raise ValueError("weekday_alpha must be a 7-vector summing to zero")
        if self.dispersion_c < 0:
            raise ValueError("dispersion_c must be non-negative")
        for region_waves in self.waves:
            for w in region_waves:
                if w.start < 0 or w.end > self.n_days:
                    raise ValueError(f"wave [{w.start}, {w.end}) outside the date range")

    @property
    def region_ids(self) -> list[str]:
        return [f"R{i:03d}" for i in range(self.n_regions)]

    @property
    def stream_ids(self) -> list[str]:
        return [f"S{j}" for j in range(self.n_streams)]


def log_level_path(n_days: int, waves: tuple[Wave, ...]) -> np.ndarray:
    """Continuous piecewise-linear log level (0 at the first wave's start)."""
    if not waves:
        return np.zeros(n_days)
    g = np.full(n_days, -SHALLOW_DECAY)
    for w in waves:
        g[max(w.start - EDGE_DIP_DAYS, 0) : w.start] = -w.rate
        g[w.start : w.end] = w.rate
        g[w.end : min(w.end + EDGE_DIP_DAYS, n_days)] = -w.rate
    z = np.concatenate([[0.0], np.cumsum(g[:-1])])
    z -= z[waves[0].start]
    return z


def generate_panel(spec: ScenarioSpec) -> tuple[StreamPanel, TrendIntervalSet]:
    """Draw the panel and return it with the planted truth intervals.

    Each region consumes its own child of the master seed, so the output is
    deterministic regardless of generation order.
    """
    weekday_alpha = np.asarray(spec.weekday_alpha)
    day_offsets = np.arange(spec.n_days)
    dates = spec.start_date + day_offsets
    weekdays = (dates - 1) % 7  # ordinal 1 = Monday
    region_seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_regions)

    observations: dict[tuple[str, str, int], float] = {}
    truth: dict[str, tuple[TrendInterval, ...]] = {}
    for i, region in enumerate(spec.region_ids):
        rng = np.random.default_rng(region_seeds[i])
        z = log_level_path(spec.n_days, spec.waves[i])
        for j, stream in enumerate(spec.stream_ids):
            mu = spec.stream_scales[j] * spec.baseline_mu[i] * np.exp(z + weekday_alpha[weekdays])
            c = spec.dispersion_c * spec.stream_noise_multipliers[j]
            if c > 0:
                counts = rng.negative_binomial(1.0 / c, 1.0 / (1.0 + c * mu))
            else:
                counts = rng.poisson(mu)
            for d, y in zip(dates, counts):
                observations[(region, stream, int(d))] = float(y)
        truth[region] = tuple(
            TrendInterval(region, int(spec.start_date + w.start), int(spec.start_date + w.end))
            for w in spec.waves[i]
        )
    panel = StreamPanel(observations, {s: "count" for s in spec.stream_ids})
    provenance = {"scenario_seed": spec.seed, "planted": True}
    return panel, TrendIntervalSet(truth, provenance)


def region_metadata(spec: ScenarioSpec) -> list[RegionMeta]:
    """One synthetic state per planted cluster, regions on a jittered grid."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xE0]))
    metas = []
    for i, region in enumerate(spec.region_ids):
        cluster = spec.cluster_of[i]
        lat = 30.0 + 2.0 * cluster + float(rng.uniform(-0.8, 0.8))
        lon = -110.0 + 3.0 * (i % 10) + float(rng.uniform(-1.0, 1.0))
        metas.append(RegionMeta(region, f"ST{cluster:02d}", lat, lon, int(50_000 * (1 + cluster))))
    return metas


def desk540(
    seed: int = 20240101,
    n_regions: int = 100,
    n_clusters: int = 10,
    n_days: int = 540,
) -> ScenarioSpec:
    """Default benchmark: 100 regions, 3 streams, 540 days, 10 clusters.

    Cluster wave templates (2-3 waves, rate 0.04-0.07/day, 25-40 days) are
    shared within a cluster with each region's starts jittered by up to
    +/-5 days. Baselines are log-uniform on [20, 200]; streams share the
    latent path at scales (1, 0.7, 0.4) with dispersion c * (1, 2, 5).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5C]))
    weekday_alpha = np.array([0.12, 0.2, 0.05, -0.03, -0.1, -0.14, -0.1])

    if n_days < 160:
        raise ValueError("desk540 needs at least 160 days to place a wave")
    max_waves = 1 + (n_days - 120) // 120  # 120-day spacing keeps inter-wave decays apart
    templates = []
    for _ in range(n_clusters):
        n_waves = min(int(rng.integers(2, 4)), max_waves)
        starts = np.sort(rng.integers(40, n_days - 80, n_waves))
        # keep room for the flanking dips and the between-wave decay
        while np.any(np.diff(starts) < 120):
            starts = np.sort(rng.integers(40, n_days - 80, n_waves))
        templates.append(
            [
                (int(s), int(rng.integers(25, 41)), float(rng.uniform(0.04, 0.07)))
                for s in starts
            ]
        )

    cluster_of = tuple(int(i % n_clusters) for i in range(n_regions))
    baseline_mu = tuple(float(np.exp(rng.uniform(np.log(20.0), np.log(200.0)))) for _ in range(n_regions))
    waves = []
    for i in range(n_regions):
        region_waves = []
        for s, d, r in templates[cluster_of[i]]:
            jitter = int(rng.integers(-5, 6))
            region_waves.append(Wave(s + jitter, d, r))
        waves.append(tuple(region_waves))

    return ScenarioSpec(
        seed=seed,
        n_regions=n_regions,
        n_streams=3,
        n_days=n_days,
        baseline_mu=baseline_mu,
        waves=tuple(waves),
        weekday_alpha=tuple(weekday_alpha),
        dispersion_c=0.1,
        cluster_of=cluster_of,
        stream_scales=(1.0, 0.7, 0.4),
        stream_noise_multipliers=(1.0, 2.0, 5.0),
    )
