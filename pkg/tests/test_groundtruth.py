"""Tests for consensus trend intervals across a smoothing-strength grid."""

from __future__ import annotations

import csv

import numpy as np
import pytest

from trendwatch.errors import DataError
from trendwatch.groundtruth import (
    TrendInterval,
    TrendIntervalSet,
    build_ground_truth,
    complement_intervals,
    consensus_trends,
    load_intervals_csv,
    positive_runs,
    write_intervals_csv,
)
from trendwatch.panel import StreamPanel, parse_date
from trendwatch.synthetic import ScenarioSpec, Wave, generate_panel

START = parse_date("2021-01-01")


def test_interval_validation_and_props():
    iv = TrendInterval("R1", 100, 110)
    assert iv.duration == 11
    assert iv.contains(100) and iv.contains(110) and not iv.contains(111)
    with pytest.raises(ValueError):
        TrendInterval("R1", 110, 100)
    with pytest.raises(ValueError):
        TrendIntervalSet({"R1": (TrendInterval("R1", 1, 10), TrendInterval("R1", 5, 20))})


def test_positive_runs():
    mask = np.array([0, 1, 1, 1, 0, 1, 1, 0, 1], dtype=bool)
    dates = np.arange(100, 109)
    assert positive_runs(mask, dates, 2) == [(101, 103), (105, 106)]
    assert positive_runs(mask, dates, 1) == [(101, 103), (105, 106), (108, 108)]
    assert positive_runs(mask, dates, 4) == []


def test_consensus_unanimous_growth():
    dates = np.arange(100, 120)  # growth axis; day axis extends one further
    g = np.ones(20) * 0.01
    ups, nulls = consensus_trends("R1", dates, [g, g.copy()], min_duration=7)
    assert len(ups) == 1
    assert (ups[0].start, ups[0].end) == (100, 120)
    assert nulls == []


def test_consensus_requires_agreement():
    dates = np.arange(100, 120)
    g1 = np.ones(20) * 0.01
    g1[15:] = -0.01
    g2 = g1.copy()
    g2[10:] = -0.01  # the configs disagree on growth indices 10..14
    ups, nulls = consensus_trends("R1", dates, [g1, g2], min_duration=7)
    assert len(ups) == 1
    # growth index 9 spans days (109, 110): day 110 is the last marked-up day
    assert (ups[0].start, ups[0].end) == (100, 110)
    # null days need every config <= eps: only indices 15..19 qualify
    assert [(iv.start, iv.end) for iv in nulls] == [(115, 120)]


def test_consensus_min_duration_filters_short_runs():
    dates = np.arange(100, 120)
    g = np.full(20, -0.01)
    g[5:9] = 0.01  # 4 positive steps -> 5 up days, below the 7-day floor
    ups, nulls = consensus_trends("R1", dates, [g, g.copy()], min_duration=7)
    assert ups == []
    ups2, _ = consensus_trends("R1", dates, [g, g.copy()], min_duration=5)
    assert [(iv.start, iv.end) for iv in ups2] == [(105, 109)]


def test_consensus_is_anti_monotone_in_configs():
    """Adding a config can only shrink the unanimous-growth day set."""
    rng = np.random.default_rng(4)
    dates = np.arange(200, 280)
    gs = [rng.normal(0.002, 0.01, 80) for _ in range(4)]
    up2, _ = consensus_trends("R1", dates, gs[:2], min_duration=1)
    up4, _ = consensus_trends("R1", dates, gs, min_duration=1)
    days2 = {d for iv in up2 for d in range(iv.start, iv.end + 1)}
    days4 = {d for iv in up4 for d in range(iv.start, iv.end + 1)}
    assert days4 <= days2


def test_consensus_input_validation():
    dates = np.arange(100, 110)
    g = np.ones(10)
    with pytest.raises(DataError):
        consensus_trends("R1", dates, [g])
    with pytest.raises(DataError):
        consensus_trends("R1", dates, [g, np.ones(9)])


def _tiny_panel(n_days=260, seed=42):
    spec = ScenarioSpec(
        seed=seed,
        n_regions=3,
        n_streams=2,
        n_days=n_days,
        baseline_mu=(80.0, 120.0, 100.0),
        waves=(
            (Wave(start=70, duration=35, rate=0.06),),
            (Wave(start=100, duration=30, rate=0.05),),
            (),
        ),
        weekday_alpha=(0.1, 0.15, 0.05, -0.02, -0.08, -0.12, -0.08),
        dispersion_c=0.05,
        cluster_of=(0, 0, 1),
        stream_scales=(1.0, 0.8),
        stream_noise_multipliers=(1.0, 1.0),
    )
    return generate_panel(spec)


def test_build_ground_truth_recovers_planted_waves():
    panel, planted = _tiny_panel()
    res = build_ground_truth(panel, ["S0", "S1"], lambda_grid=(1e3, 1e4))
    assert res.excluded == {}
    for region in ("R000", "R001"):
        truth = planted.for_region(region)
        found = res.increasing.for_region(region)
        assert len(found) >= 1
        # some found interval overlaps each planted wave with small boundary error
        for iv in truth:
            best = min(
                found,
                key=lambda f: abs(f.start - iv.start) + abs(f.end - iv.end),
            )
            assert abs(best.start - iv.start) <= 6
            assert abs(best.end - iv.end) <= 6
    # spans with no planted wave stay quiet apart from the wave neighborhoods
    assert res.null.for_region("R002")  # flat region has consensus-null days


def test_build_ground_truth_signal_floor_excludes():
    panel, _ = _tiny_panel(n_days=200)
    res = build_ground_truth(
        panel, ["S0", "S1"], lambda_grid=(1e3, 1e4), signal_floor=1e9
    )
    assert set(res.excluded) == {"R000", "R001", "R002"}
    assert res.increasing.regions == []


def test_build_ground_truth_requires_grid():
    panel, _ = _tiny_panel(n_days=200)
    with pytest.raises(DataError):
        build_ground_truth(panel, ["S0"], lambda_grid=(1e3,))


def test_consensus_subset_of_each_config():
    """Every consensus-increasing day is increasing under each single lambda."""
    panel, _ = _tiny_panel()
    grid = (1e3, 1e4)
    res = build_ground_truth(panel, ["S0", "S1"], lambda_grid=grid)
    singles = [
        build_ground_truth(panel, ["S0", "S1"], lambda_grid=(lam, lam), min_duration=1)
        for lam in grid
    ]
    for region in res.increasing.regions:
        for iv in res.increasing.for_region(region):
            for day in range(iv.start, iv.end + 1):
                for single in singles:
                    assert single.increasing.covers(region, day)


def test_complement_intervals():
    truth = TrendIntervalSet({"R1": (TrendInterval("R1", 105, 110),)})
    comp = complement_intervals(truth, (100, 120))
    spans = [(iv.start, iv.end) for iv in comp.for_region("R1")]
    assert spans == [(100, 104), (111, 120)]
    # interval covering the whole range leaves nothing
    full = TrendIntervalSet({"R1": (TrendInterval("R1", 100, 120),)})
    assert complement_intervals(full, (100, 120)).for_region("R1") == ()


def test_intervals_csv_roundtrip(tmp_path):
    truth = TrendIntervalSet(
        {
            "R1": (TrendInterval("R1", START, START + 10),),
            "R2": (TrendInterval("R2", START + 5, START + 30),),
        }
    )
    path = tmp_path / "truth.csv"
    write_intervals_csv(path, truth)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["region_id"] for r in rows} == {"R1", "R2"}
    loaded = load_intervals_csv(path)
    assert loaded.intervals == truth.intervals
