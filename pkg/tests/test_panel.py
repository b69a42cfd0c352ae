import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trendwatch.errors import DataError, DuplicateObservationError, TransportError, WindowGapError
from trendwatch.panel import (
    StreamPanel,
    RegionMeta,
    Window,
    extract_window,
    fill_gaps,
    format_date,
    load_panel_csv,
    parse_date,
    weekday_of,
    write_panel_csv,
)


def test_parse_format_roundtrip():
    assert format_date(parse_date("2021-01-07")) == "2021-01-07"


def test_weekday_convention():
    # 2021-01-07 was a Thursday
    assert weekday_of(parse_date("2021-01-07")) == 3
    assert weekday_of(parse_date("2021-01-10")) == 6  # Sunday


@given(st.integers(min_value=1, max_value=1_000_000))
def test_weekday_matches_datetime(ordinal):
    from datetime import date

    assert weekday_of(ordinal) == date.fromordinal(ordinal).weekday()


def test_region_meta_validation():
    with pytest.raises(ValueError):
        RegionMeta("R1", "PA", latitude=91.0, longitude=0.0)
    with pytest.raises(ValueError):
        RegionMeta("R1", "PA", population=0)


def test_window_requires_min_length():
    with pytest.raises(ValueError):
        Window(values=np.array([1.0, 2.0]), end_date=100)


def test_load_panel_csv_reports_bad_rows(tmp_path):
    p = tmp_path / "panel.csv"
    p.write_text(
        "region_id,stream_id,date,value\n"
        "R1,cases,2021-01-01,5\n"
        "R1,cases,not-a-date,6\n"
        "R1,cases,2021-01-03,-2\n"
        "R1,cases,2021-01-04,7\n"
    )
    panel, issues = load_panel_csv(p)
    assert len(panel.observations) == 2
    assert len(issues) == 2
    assert {i.line for i in issues} == {3, 4}


def test_load_panel_csv_duplicate_raises(tmp_path):
    p = tmp_path / "panel.csv"
    p.write_text(
        "region_id,stream_id,date,value\n"
        "R1,cases,2021-01-01,5\n"
        "R1,cases,2021-01-01,6\n"
    )
    with pytest.raises(DuplicateObservationError) as exc:
        load_panel_csv(p)
    assert "R1" in str(exc.value)


def test_panel_csv_roundtrip(tmp_path):
    obs = {("R1", "cases", 737791 + i): float(i) for i in range(5)}
    panel = StreamPanel(obs, {"cases": "count"})
    path = tmp_path / "out.csv"
    write_panel_csv(panel, path)
    loaded, issues = load_panel_csv(path, {"cases": "count"})
    assert issues == []
    assert loaded.observations == panel.observations


def test_fill_gaps_interpolates_short_gaps():
    dates = np.array([0, 1, 2, 6, 7])
    values = np.array([0.0, 1.0, 2.0, 6.0, 7.0])
    full_dates, filled = fill_gaps(dates, values, gap_policy="interpolate")
    assert list(full_dates) == list(range(8))
    np.testing.assert_allclose(filled, np.arange(8.0))


def test_fill_gaps_rejects_long_gaps():
    dates = np.array([0, 1, 10])
    values = np.array([1.0, 1.0, 1.0])
    with pytest.raises(WindowGapError):
        fill_gaps(dates, values, gap_policy="interpolate")


def test_extract_window_needs_observed_endpoints():
    obs = {("R", "s", d): 1.0 for d in range(100, 121)}
    panel = StreamPanel(obs)
    w = extract_window(panel, "R", "s", end_date=120, n=7)
    assert len(w.values) == 7
    with pytest.raises(DataError):
        extract_window(panel, "R", "s", end_date=125, n=7)


class _FakeResponse:
    def __init__(self, body, status=200):
        self._body = body
        self.status_code = status

    def json(self):
        return self._body


class _FakeSession:
    def __init__(self, pages, fail_first=0):
        self.pages = pages
        self.fail_first = fail_first
        self.calls = 0

    def get(self, url, params=None, timeout=None):
        self.calls += 1
        if self.calls <= self.fail_first:
            return _FakeResponse({}, status=503)
        return _FakeResponse(self.pages[url])


def test_fetch_epidata_paginates_and_retries():
    from trendwatch.panel import fetch_epidata

    pages = {
        "http://x/": {
            "epidata": [
                {"geo_value": "301", "time_value": "2021-01-01", "value": 5},
                {"geo_value": "301", "time_value": 20210102, "value": 6},
            ],
            "next": "http://x/page2",
        },
        "http://x/page2": {
            "epidata": [{"geo_value": "301", "time_value": "2021-01-03", "value": 7}]
        },
    }
    sess = _FakeSession(pages, fail_first=1)
    panel = fetch_epidata(
        "http://x/", "sig", "hrr", ["301"],
        (parse_date("2021-01-01"), parse_date("2021-01-03")),
        session=sess, backoff=0.0,
    )
    assert len(panel.observations) == 3
    assert panel.value("301", "sig", parse_date("2021-01-02")) == 6.0


def test_fetch_epidata_gives_up():
    from trendwatch.panel import fetch_epidata

    sess = _FakeSession({}, fail_first=99)
    with pytest.raises(TransportError):
        fetch_epidata("http://x/", "sig", "hrr", ["301"], (1, 2), session=sess, backoff=0.0)
