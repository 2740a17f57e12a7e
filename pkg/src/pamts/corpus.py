"""Textual-numerical series ingestion, alignment, windowing, and splits."""

from __future__ import annotations

import bisect
import csv
import datetime as dt
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    EmptyDatasetError,
    EmptySplitError,
    FormatError,
    IngestionError,
    OrderingError,
)

FREQUENCIES = ("monthly", "weekly", "daily")

STD_FLOOR = 1e-8  # clamp for constant lookback channels


def parse_date(raw: str) -> dt.date:
    """Parse YYYY-MM-DD or YYYY-MM (mapped to the first of the month)."""
    raw = raw.strip()
    for fmt in ("%Y-%m-%d", "%Y-%m"):
        try:
            return dt.datetime.strptime(raw, fmt).date()
        except ValueError:
            continue
    raise IngestionError(f"unparseable date {raw!r}")


def period_start(day: dt.date, freq: str) -> dt.date:
    """Truncate a date to the start of its period for the given frequency."""
    if freq == "monthly":
        return day.replace(day=1)
    if freq == "weekly":
        return day - dt.timedelta(days=day.weekday())
    if freq == "daily":
        return day
    raise ConfigurationError(f"unknown frequency {freq!r}")


@dataclass(frozen=True)
class ColumnSchema:
    """Column layout of a numerical CSV file."""

    date_column: str | None = None  # default: first column
    value_columns: tuple[str, ...] | None = None  # default: all non-date columns
    target_column: str | None = None  # default: first value column


@dataclass(frozen=True)
class NumericalSeries:
    """Strictly date-ordered multichannel numeric observations."""

    dates: tuple[dt.date, ...]
    values: np.ndarray  # (n, C) float64
    columns: tuple[str, ...]
    target: int = 0

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise ConfigurationError("values must be an n-by-C matrix with C >= 1")
        if len(self.dates) != self.values.shape[0]:
            raise ConfigurationError("dates and values lengths differ")
        for a, b in zip(self.dates, self.dates[1:]):
            if b <= a:
                raise OrderingError(f"dates not strictly increasing at {a} -> {b}")

    def __len__(self) -> int:
        return len(self.dates)


@dataclass(frozen=True)
class TextEvent:
    """A dated text snippet; text is stored verbatim."""

    timestamp: dt.date
    text: str


@dataclass(frozen=True)
class TextualNumericalSeries:
    """Numeric series with one aligned text per step."""

    dates: tuple[dt.date, ...]
    values: np.ndarray  # (n, C)
    texts: tuple[str, ...]
    freq: str
    columns: tuple[str, ...]
    target: int = 0

    def __post_init__(self):
        if self.freq not in FREQUENCIES:
            raise ConfigurationError(f"unknown frequency {self.freq!r}")
        if not (len(self.dates) == self.values.shape[0] == len(self.texts)):
            raise ConfigurationError("dates, values, and texts lengths differ")

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Window:
    """One forecasting instance cut from a series.

    norm_stats are the per-channel (mean, population std) of the raw
    lookback, with std clamped at STD_FLOOR; they are the only statistics
    ever used to scale the window, so targets never leak into them.
    """

    start: int
    lookback_values: np.ndarray  # (L, C)
    lookback_texts: tuple[str, ...]
    label_values: np.ndarray  # (label_len, C)
    target_values: np.ndarray  # (T, C)
    norm_stats: tuple[np.ndarray, np.ndarray]  # (mean (C,), std (C,))
    normalized: bool = False


def load_numerical(path: str | Path, schema: ColumnSchema | None = None) -> NumericalSeries:
    """Load a CSV with a date column and one or more numeric columns.

    Rows must already be in strictly increasing date order; out-of-order
    dates are an OrderingError, malformed cells an IngestionError naming
    the row.
    """
    schema = schema or ColumnSchema()
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        date_col = schema.date_column or header[0]
        if date_col not in header:
            raise FormatError(f"{path}: no date column {date_col!r}")
        date_idx = header.index(date_col)
        if schema.value_columns is not None:
            value_cols = list(schema.value_columns)
        else:
            value_cols = [h for i, h in enumerate(header) if i != date_idx]
        if not value_cols:
            raise FormatError(f"{path}: no numeric columns")
        missing = [c for c in value_cols if c not in header]
        if missing:
            raise FormatError(f"{path}: missing columns {missing}")
        value_idx = [header.index(c) for c in value_cols]

        dates: list[dt.date] = []
        rows: list[list[float]] = []
        for rownum, row in enumerate(reader, start=2):  # header is line 1
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path} row {rownum}: expected {len(header)} cells, got {len(row)}")
            try:
                day = parse_date(row[date_idx])
            except IngestionError as exc:
                raise IngestionError(f"{path} row {rownum}: {exc}") from None
            try:
                vals = [float(row[i]) for i in value_idx]
            except ValueError as exc:
                raise IngestionError(f"{path} row {rownum}: {exc}") from None
            if dates and day <= dates[-1]:
                raise OrderingError(f"{path} row {rownum}: date {day} not after {dates[-1]}")
            dates.append(day)
            rows.append(vals)

    if not rows:
        raise IngestionError(f"{path}: no data rows")
    target_col = schema.target_column or value_cols[0]
    if target_col not in value_cols:
        raise FormatError(f"{path}: target column {target_col!r} not among value columns")
    return NumericalSeries(
        dates=tuple(dates),
        values=np.asarray(rows, dtype=np.float64),
        columns=tuple(value_cols),
        target=value_cols.index(target_col),
    )


def load_text_events(path: str | Path) -> list[TextEvent]:
    """Load JSON Lines events with fields `date` and `text`; extras ignored."""
    path = Path(path)
    events: list[TextEvent] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"{path} line {lineno}: {exc}") from None
            if not isinstance(obj, dict) or "date" not in obj or "text" not in obj:
                raise FormatError(f"{path} line {lineno}: need 'date' and 'text' fields")
            try:
                day = parse_date(str(obj["date"]))
            except IngestionError as exc:
                raise IngestionError(f"{path} line {lineno}: {exc}") from None
            events.append(TextEvent(timestamp=day, text=str(obj["text"])))
    return events


def coalesce_events(events: list[TextEvent], freq: str) -> list[TextEvent]:
    """Truncate event dates to period starts and merge same-period texts.

    Texts landing in one period are joined with a single space in original
    timestamp order (ties keep input order).  Returns one event per period,
    sorted by period.
    """
    stamped = sorted(
        ((period_start(e.timestamp, freq), e.timestamp, i, e.text) for i, e in enumerate(events)),
        key=lambda t: (t[0], t[1], t[2]),
    )
    merged: dict[dt.date, list[str]] = {}
    for period, _, _, text in stamped:
        merged.setdefault(period, []).append(text)
    return [TextEvent(p, " ".join(ts)) for p, ts in sorted(merged.items())]


def align_texts(
    series: NumericalSeries,
    events: list[TextEvent],
    freq: str = "monthly",
) -> TextualNumericalSeries:
    """Attach to each step the most recent event dated no later than it.

    Steps with no eligible event get the empty string, so future text can
    never leak into a step.
    """
    coalesced = coalesce_events(events, freq)
    event_periods = [e.timestamp for e in coalesced]
    texts: list[str] = []
    for day in series.dates:
        step_period = period_start(day, freq)
        pos = bisect.bisect_right(event_periods, step_period)
        texts.append(coalesced[pos - 1].text if pos else "")
    return TextualNumericalSeries(
        dates=series.dates,
        values=series.values,
        texts=tuple(texts),
        freq=freq,
        columns=series.columns,
        target=series.target,
    )


def lookback_stats(lookback: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population std of a lookback, std clamped."""
    mean = lookback.mean(axis=0)
    std = lookback.std(axis=0)  # ddof=0: population convention
    return mean, np.maximum(std, STD_FLOOR)


def make_windows(
    series: TextualNumericalSeries,
    lookback: int,
    label_len: int,
    horizon: int,
    stride: int = 1,
) -> list[Window]:
    """Cut sliding windows; window k spans steps [k, k+L) plus T targets."""
    if lookback <= 0 or label_len <= 0 or horizon <= 0 or stride <= 0:
        raise ConfigurationError("lookback, label_len, horizon, stride must be positive")
    if label_len > lookback:
        raise ConfigurationError("label_len cannot exceed lookback")
    n = len(series)
    if n < lookback + horizon:
        raise EmptyDatasetError(f"series length {n} < lookback {lookback} + horizon {horizon}")
    windows: list[Window] = []
    for start in range(0, n - lookback - horizon + 1, stride):
        lb = series.values[start : start + lookback]
        windows.append(
            Window(
                start=start,
                lookback_values=lb.copy(),
                lookback_texts=tuple(series.texts[start : start + lookback]),
                label_values=series.values[start + lookback - label_len : start + lookback].copy(),
                target_values=series.values[start + lookback : start + lookback + horizon].copy(),
                norm_stats=lookback_stats(lb),
            )
        )
    return windows


def normalize_window(window: Window) -> Window:
    """Scale all value blocks by the lookback statistics."""
    mean, std = window.norm_stats
    return replace(
        window,
        lookback_values=(window.lookback_values - mean) / std,
        label_values=(window.label_values - mean) / std,
        target_values=(window.target_values - mean) / std,
        normalized=True,
    )


def denormalize(preds: np.ndarray, stats: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """Invert normalize_window on a (T, C) prediction block."""
    mean, std = stats
    return preds * std + mean


def chronological_split(
    series: TextualNumericalSeries,
    ratios: tuple[float, float, float],
    min_len: int = 1,
) -> tuple[TextualNumericalSeries, TextualNumericalSeries, TextualNumericalSeries]:
    """Split contiguously into train/val/test by ratios.

    min_len is the smallest admissible split length (pass lookback+horizon
    to guarantee each split hosts at least one window).
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigurationError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(series)
    n_train = int(ratios[0] * n)
    n_val = int(ratios[1] * n)
    bounds = (0, n_train, n_train + n_val, n)
    parts = []
    for lo, hi in zip(bounds, bounds[1:]):
        if hi - lo < min_len:
            raise EmptySplitError(f"split [{lo}:{hi}] shorter than {min_len} steps")
        parts.append(
            TextualNumericalSeries(
                dates=series.dates[lo:hi],
                values=series.values[lo:hi].copy(),
                texts=series.texts[lo:hi],
                freq=series.freq,
                columns=series.columns,
                target=series.target,
            )
        )
    return parts[0], parts[1], parts[2]


def save_bundle(series: TextualNumericalSeries, path: str | Path) -> None:
    """Write a series as a JSON bundle (dates, values, texts, freq)."""
    payload = {
        "freq": series.freq,
        "columns": list(series.columns),
        "target": series.target,
        "steps": [
            {"date": d.isoformat(), "values": [float(v) for v in row], "text": t}
            for d, row, t in zip(series.dates, series.values, series.texts)
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def load_bundle(path: str | Path) -> TextualNumericalSeries:
    """Read a series bundle written by save_bundle."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    steps = payload.get("steps", [])
    if not steps:
        raise FormatError(f"{path}: bundle has no steps")
    dates = tuple(parse_date(s["date"]) for s in steps)
    values = np.asarray([s["values"] for s in steps], dtype=np.float64)
    texts = tuple(str(s["text"]) for s in steps)
    return TextualNumericalSeries(
        dates=dates,
        values=values,
        texts=texts,
        freq=payload.get("freq", "monthly"),
        columns=tuple(payload.get("columns", [f"c{i}" for i in range(values.shape[1])])),
        target=int(payload.get("target", 0)),
    )
