"""Observation panel: data model, calendar arithmetic, CSV ingestion, windowing.

Dates are ISO-8601 strings in every file and plain proleptic-Gregorian ordinals
(``datetime.date.toordinal``) everywhere in memory. Missing data is an absent
key, never 0.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from datetime import date as _date
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DuplicateObservationError,
    InsufficientHistoryError,
    SchemaError,
    TransportError,
    WindowGapError,
)

PANEL_COLUMNS = ("region_id", "stream_id", "date", "value")
META_COLUMNS = ("region_id", "state_code", "latitude", "longitude", "population")


def parse_date(text: str) -> int:
    """ISO-8601 date string -> ordinal day number."""
    return _date.fromisoformat(text.strip()).toordinal()


def format_date(ordinal: int) -> str:
    return _date.fromordinal(int(ordinal)).isoformat()


def weekday_of(ordinal: int) -> int:
    """Day of week for an ordinal date; 0 = Monday .. 6 = Sunday."""
    return _date.fromordinal(int(ordinal)).weekday()


@dataclass(frozen=True)
class RegionMeta:
    region_id: str
    state_code: str
    latitude: float | None = None
    longitude: float | None = None
    population: int | None = None

    def __post_init__(self):
        if self.latitude is not None and not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude out of range for {self.region_id}: {self.latitude}")
        if self.longitude is not None and not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude out of range for {self.region_id}: {self.longitude}")
        if self.population is not None and self.population <= 0:
            raise ValueError(f"population must be positive for {self.region_id}")


@dataclass(frozen=True)
class StreamPanel:
    """Immutable multi-region, multi-stream daily observation table.

    ``observations`` maps (region_id, stream_id, date_ordinal) -> value >= 0.
    ``stream_kinds`` maps stream_id -> "count" or "rate".
    """

    observations: Mapping[tuple[str, str, int], float]
    stream_kinds: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for kind in self.stream_kinds.values():
            if kind not in ("count", "rate"):
                raise ValueError(f"unknown stream kind: {kind}")

    @property
    def regions(self) -> list[str]:
        return sorted({k[0] for k in self.observations})

    @property
    def streams(self) -> list[str]:
        return sorted({k[1] for k in self.observations})

    @property
    def date_range(self) -> tuple[int, int]:
        dates = [k[2] for k in self.observations]
        if not dates:
            raise ValueError("empty panel has no date range")
        return min(dates), max(dates)

    def stream_kind(self, stream_id: str) -> str:
        return self.stream_kinds.get(stream_id, "count")

    def value(self, region: str, stream: str, date: int) -> float | None:
        return self.observations.get((region, stream, date))

    def series(self, region: str, stream: str) -> tuple[np.ndarray, np.ndarray]:
        """All observations for one (region, stream), sorted by date."""
        items = sorted(
            (d, v) for (r, s, d), v in self.observations.items() if r == region and s == stream
        )
        if not items:
            return np.empty(0, dtype=int), np.empty(0)
        dates, values = zip(*items)
        return np.asarray(dates, dtype=int), np.asarray(values, dtype=float)

    def __len__(self) -> int:
        return len(self.observations)


@dataclass(frozen=True)
class Window:
    """A gap-free run of daily values ending at ``end_date`` (n >= 3)."""

    values: np.ndarray
    end_date: int

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.values.ndim != 1 or len(self.values) < 3:
            raise ValueError("window needs at least 3 daily values")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("window values must be finite")

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def dates(self) -> np.ndarray:
        return np.arange(self.end_date - self.n + 1, self.end_date + 1)

    def weekdays(self) -> np.ndarray:
        return np.array([weekday_of(d) for d in self.dates])


@dataclass(frozen=True)
class RowIssue:
    line: int
    reason: str


def load_panel_csv(
    path,
    stream_kinds: Mapping[str, str] | None = None,
    columns: Sequence[str] = PANEL_COLUMNS,
) -> tuple[StreamPanel, list[RowIssue]]:
    """Read a panel CSV; bad rows go into the issue report, never silently dropped.

    Duplicate (region, stream, date) keys raise DuplicateObservationError.
    """
    observations: dict[tuple[str, str, int], float] = {}
    issues: list[RowIssue] = []
    duplicates = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in columns if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        rcol, scol, dcol, vcol = columns
        for lineno, row in enumerate(reader, start=2):
            try:
                d = parse_date(row[dcol])
            except (ValueError, TypeError):
                issues.append(RowIssue(lineno, f"unparseable date: {row.get(dcol)!r}"))
                continue
            try:
                v = float(row[vcol])
            except (ValueError, TypeError):
                issues.append(RowIssue(lineno, f"non-numeric value: {row.get(vcol)!r}"))
                continue
            if not np.isfinite(v) or v < 0:
                issues.append(RowIssue(lineno, f"negative or non-finite value: {v}"))
                continue
            key = (row[rcol], row[scol], d)
            if key in observations:
                duplicates.append((row[rcol], row[scol], format_date(d)))
                continue
            observations[key] = v
    if duplicates:
        raise DuplicateObservationError(duplicates)
    return StreamPanel(observations, dict(stream_kinds or {})), issues


def write_panel_csv(panel: StreamPanel, path) -> None:
    """Write a panel in the standard 4-column schema, sorted for determinism."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PANEL_COLUMNS)
        for (region, stream, d) in sorted(panel.observations):
            value = panel.observations[(region, stream, d)]
            writer.writerow([region, stream, format_date(d), repr(value)])


def load_region_metadata(path) -> dict[str, RegionMeta]:
    metas: dict[str, RegionMeta] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in ("region_id", "state_code") if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        for row in reader:
            rid = row["region_id"]
            if rid in metas:
                raise DuplicateObservationError([rid])

            def _opt(col, cast):
                raw = row.get(col)
                return cast(raw) if raw not in (None, "") else None

            metas[rid] = RegionMeta(
                region_id=rid,
                state_code=row["state_code"],
                latitude=_opt("latitude", float),
                longitude=_opt("longitude", float),
                population=_opt("population", int),
            )
    return metas


def write_region_metadata(metas: Mapping[str, RegionMeta], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(META_COLUMNS)
        for rid in sorted(metas):
            m = metas[rid]
            writer.writerow(
                [
                    m.region_id,
                    m.state_code,
                    "" if m.latitude is None else repr(m.latitude),
                    "" if m.longitude is None else repr(m.longitude),
                    "" if m.population is None else m.population,
                ]
            )


MAX_INTERPOLATED_GAP = 7


def fill_gaps(
    dates: np.ndarray, values: np.ndarray, gap_policy: str = "interpolate"
) -> tuple[np.ndarray, np.ndarray]:
    """Resample an observed series onto a daily grid.

    Interior gaps of <= 7 consecutive missing days are linearly interpolated
    under the "interpolate" policy; longer gaps (or any gap under "fail")
    raise WindowGapError.
    """
    if gap_policy not in ("fail", "interpolate"):
        raise ValueError(f"unknown gap policy: {gap_policy}")
    if len(dates) == 0:
        return dates, values
    full = np.arange(dates[0], dates[-1] + 1)
    if len(full) == len(dates):
        return dates, values
    if gap_policy == "fail":
        raise WindowGapError("series has missing days and gap policy is 'fail'")
    present = np.isin(full, dates)
    runs = _missing_runs(present)
    too_long = [r for r in runs if r[1] - r[0] + 1 > MAX_INTERPOLATED_GAP]
    if too_long:
        start, end = too_long[0]
        raise WindowGapError(
            f"gap of {end - start + 1} days starting {format_date(full[start])} "
            f"exceeds the {MAX_INTERPOLATED_GAP}-day interpolation limit"
        )
    filled = np.interp(full, dates, values)
    return full, filled


def _missing_runs(present: np.ndarray) -> list[tuple[int, int]]:
    runs = []
    start = None
    for i, ok in enumerate(present):
        if not ok and start is None:
            start = i
        elif ok and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(present) - 1))
    return runs


def extract_window(
    panel: StreamPanel,
    region: str,
    stream: str,
    end_date: int,
    n: int,
    gap_policy: str = "interpolate",
) -> Window:
    """The n most recent daily values ending at ``end_date``.

    Both endpoints must be observed; interior gaps are handled per gap policy.
    """
    if n < 3:
        raise ValueError("window size must be at least 3")
    start_date = end_date - n + 1
    obs = panel.observations
    dates, values = [], []
    for d in range(start_date, end_date + 1):
        v = obs.get((region, stream, d))
        if v is not None:
            dates.append(d)
            values.append(v)
    if not dates or dates[0] != start_date or dates[-1] != end_date:
        raise InsufficientHistoryError(
            f"{region}/{stream}: window [{format_date(start_date)}, {format_date(end_date)}] "
            "is not fully covered by observed endpoints"
        )
    full, filled = fill_gaps(np.asarray(dates), np.asarray(values, dtype=float), gap_policy)
    assert len(full) == n
    return Window(values=filled, end_date=end_date)


def fetch_epidata(
    base_url: str,
    signal: str,
    geo_type: str,
    geo_values: Iterable[str],
    date_range: tuple[int, int],
    *,
    session=None,
    max_attempts: int = 3,
    backoff: float = 0.5,
    stream_kind: str = "count",
) -> StreamPanel:
    """Pull one signal from an epidata-style JSON endpoint into a panel.

    Expects a JSON body with an ``epidata`` list of rows carrying
    ``geo_value``, ``time_value`` (ISO string or YYYYMMDD int) and ``value``.
    Pagination follows an optional ``next`` URL in the body. Retries each
    request up to ``max_attempts`` times with exponential backoff.
    """
    import requests

    sess = session or requests.Session()
    params = {
        "signal": signal,
        "geo_type": geo_type,
        "geo_values": ",".join(geo_values),
        "start": format_date(date_range[0]),
        "end": format_date(date_range[1]),
    }
    observations: dict[tuple[str, str, int], float] = {}
    url, query = base_url, params
    while url:
        body = _fetch_json(sess, url, query, max_attempts, backoff)
        rows = body.get("epidata")
        if rows is None:
            raise TransportError(f"{url}: response body has no 'epidata' field")
        for row in rows:
            try:
                d = _parse_epidata_date(row["time_value"])
                key = (str(row["geo_value"]), signal, d)
                value = float(row["value"])
            except (KeyError, ValueError, TypeError) as exc:
                raise TransportError(f"{url}: malformed epidata row {row!r}") from exc
            observations.setdefault(key, value)
        url, query = body.get("next"), None
    return StreamPanel(observations, {signal: stream_kind})


def _fetch_json(sess, url, params, max_attempts, backoff):
    last_error = None
    for attempt in range(max_attempts):
        if attempt:
            time.sleep(backoff * 2 ** (attempt - 1))
        try:
            response = sess.get(url, params=params, timeout=30)
        except Exception as exc:  # connection-level failure
            last_error = exc
            continue
        if response.status_code // 100 != 2:
            last_error = TransportError(f"{url}: HTTP {response.status_code}")
            continue
        try:
            return response.json()
        except ValueError as exc:
            last_error = TransportError(f"{url}: malformed JSON body")
            continue
    raise TransportError(f"{url}: giving up after {max_attempts} attempts: {last_error}")


def _parse_epidata_date(raw) -> int:
    if isinstance(raw, str):
        return parse_date(raw)
    raw = int(raw)
    return _date(raw // 10000, raw // 100 % 100, raw % 100).toordinal()
