"""Reading and writing point displacement time series from L3-style CSV tiles.

Input files are UTF-8 comma-separated tables: one header row, coordinate
columns ``easting``/``northing`` in metres (EPSG:3035), and one column per
acquisition date holding vertical displacement in millimetres. Any further
columns (point ids, quality summaries) are ignored. Date headers are
normally ``YYYYMMDD`` but any parseable ISO-like date is accepted.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass
from datetime import date, datetime
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

TILE_PATTERN = "E<2 digits>N<2 digits>"

# Missing displacement cells: empty string or a spelled-out NaN.
_MISSING = {"", "nan", "NaN", "NAN", "na", "NA"}


class IngestError(ValueError):
    """Malformed tile label or CSV structure."""


@dataclass(frozen=True)
class TileId:
    """100 km x 100 km tile address in EPSG:3035, easting/northing in 100 km units."""

    easting_100km: int
    northing_100km: int

    def __post_init__(self):
        if self.easting_100km < 0 or self.northing_100km < 0:
            raise IngestError(
                f"tile indices must be non-negative, got "
                f"({self.easting_100km}, {self.northing_100km})"
            )

    @property
    def raw(self) -> str:
        return f"E{self.easting_100km:02d}N{self.northing_100km:02d}"

    @property
    def origin_m(self) -> tuple[float, float]:
        """Lower-left corner (easting, northing) in metres."""
        return (self.easting_100km * 100_000.0, self.northing_100km * 100_000.0)

    extent_m = (100_000.0, 100_000.0)


def parse_tile_id(label: str) -> TileId:
    """Parse a tile label such as ``E32N34``.

    Malformed labels raise IngestError naming the first offending
    character position.
    """
    expected = ["E", "digit", "digit", "N", "digit", "digit"]
    for pos, want in enumerate(expected):
        if pos >= len(label):
            raise IngestError(
                f"tile label {label!r}: truncated at position {pos}, "
                f"expected {TILE_PATTERN}"
            )
        ch = label[pos]
        ok = ch.isdigit() if want == "digit" else ch == want
        if not ok:
            raise IngestError(
                f"tile label {label!r}: unexpected character {ch!r} at "
                f"position {pos}, expected {TILE_PATTERN}"
            )
    if len(label) != 6:
        raise IngestError(
            f"tile label {label!r}: trailing characters at position 6, "
            f"expected {TILE_PATTERN}"
        )
    return TileId(int(label[1:3]), int(label[4:6]))


@dataclass(frozen=True)
class AcquisitionCalendar:
    """Strictly increasing acquisition dates shared by every point of a tile."""

    dates: tuple[date, ...]

    def __post_init__(self):
        if len(self.dates) < 2:
            raise IngestError(f"calendar needs >= 2 dates, got {len(self.dates)}")
        for a, b in zip(self.dates, self.dates[1:]):
            if not a < b:
                raise IngestError(f"calendar not strictly increasing at {a} -> {b}")

    def __len__(self):
        return len(self.dates)

    @property
    def epoch_days(self) -> np.ndarray:
        """Days elapsed since the first acquisition, as float64."""
        first = self.dates[0]
        return np.array([(d - first).days for d in self.dates], dtype=np.float64)


@dataclass
class PointRecord:
    easting_m: float
    northing_m: float
    displacement_mm: np.ndarray  # (T,), may contain NaN for missing epochs


@dataclass
class PointCloudSeries:
    """Irregular scatterer time series sharing one acquisition calendar."""

    tile: TileId | None
    calendar: AcquisitionCalendar
    points: list[PointRecord]
    skipped_rows: tuple[int, ...] = ()

    def __post_init__(self):
        T = len(self.calendar)
        for k, p in enumerate(self.points):
            if p.displacement_mm.shape != (T,):
                raise IngestError(
                    f"point {k}: series shape {p.displacement_mm.shape} "
                    f"does not match calendar length {T}"
                )

    def coords(self) -> np.ndarray:
        return np.array(
            [[p.easting_m, p.northing_m] for p in self.points], dtype=np.float64
        )

    def matrix(self) -> np.ndarray:
        """Displacement as an (n_points, T) array."""
        return np.array([p.displacement_mm for p in self.points], dtype=np.float64)


def _parse_date_header(text: str):
    s = text.strip()
    for fmt in ("%Y%m%d", "%Y-%m-%d", "%Y/%m/%d"):
        try:
            return datetime.strptime(s, fmt).date()
        except ValueError:
            pass
    return None


def _infer_tile(path: Path) -> TileId | None:
    m = re.search(r"E\d{2}N\d{2}", path.name)
    return parse_tile_id(m.group(0)) if m else None


def load_l3_csv(path, tile: TileId | None = None) -> PointCloudSeries:
    """Load a point time-series CSV.

    Rows with unparseable coordinates or displacement cells are skipped,
    counted, and reported (physical 1-based line numbers, header = line 1).
    Missing displacement cells (empty or NaN text) are kept as NaN.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        lower = [h.strip().lower() for h in header]
        try:
            e_col = lower.index("easting")
            n_col = lower.index("northing")
        except ValueError:
            missing = [c for c in ("easting", "northing") if c not in lower]
            raise IngestError(
                f"{path}: missing coordinate column(s): {', '.join(missing)}"
            ) from None

        date_cols = []
        for idx, name in enumerate(header):
            d = _parse_date_header(name)
            if d is not None:
                date_cols.append((d, idx))
        if len(date_cols) < 2:
            raise IngestError(
                f"{path}: found {len(date_cols)} date column(s), need >= 2"
            )
        date_cols.sort(key=lambda p: p[0])
        if any(a[0] == b[0] for a, b in zip(date_cols, date_cols[1:])):
            raise IngestError(f"{path}: duplicate acquisition dates in header")
        calendar = AcquisitionCalendar(tuple(d for d, _ in date_cols))
        order = [idx for _, idx in date_cols]

        points, skipped = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                e = float(row[e_col])
                n = float(row[n_col])
                series = np.empty(len(order))
                for k, col in enumerate(order):
                    cell = row[col].strip()
                    series[k] = math.nan if cell in _MISSING else float(cell)
            except (ValueError, IndexError) as exc:
                skipped.append(line_no)
                log.warning("%s: skipping line %d: %s", path.name, line_no, exc)
                continue
            points.append(PointRecord(e, n, series))

    if skipped:
        log.warning("%s: skipped %d malformed row(s)", path.name, len(skipped))
    return PointCloudSeries(
        tile=tile if tile is not None else _infer_tile(path),
        calendar=calendar,
        points=points,
        skipped_rows=tuple(skipped),
    )


def save_l3_csv(series: PointCloudSeries, path) -> None:
    """Write a series back to CSV (dates as YYYYMMDD, NaN as empty cells).

    Values are formatted with shortest round-trip precision so a
    save/load cycle reproduces them bitwise.
    """
    path = Path(path)
    header = ["easting", "northing"] + [
        d.strftime("%Y%m%d") for d in series.calendar.dates
    ]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for p in series.points:
            cells = [repr(float(p.easting_m)), repr(float(p.northing_m))]
            cells += [
                "" if math.isnan(v) else repr(float(v)) for v in p.displacement_mm
            ]
            writer.writerow(cells)


def clean_series(
    series: PointCloudSeries, max_missing_fraction: float = 0.2
) -> tuple[PointCloudSeries, int]:
    """Prepare a series for rasterization.

    Points with more than `max_missing_fraction` missing epochs are
    dropped; remaining gaps are filled by per-point linear interpolation
    in time (edges held at the nearest observed value). Returns the dense
    series and the number of dropped points.
    """
    T = len(series.calendar)
    days = series.calendar.epoch_days
    kept, dropped = [], 0
    for p in series.points:
        gaps = np.isnan(p.displacement_mm)
        n_gaps = int(gaps.sum())
        if n_gaps > max_missing_fraction * T:
            dropped += 1
            continue
        if n_gaps:
            filled = p.displacement_mm.copy()
            filled[gaps] = np.interp(days[gaps], days[~gaps], filled[~gaps])
            p = PointRecord(p.easting_m, p.northing_m, filled)
        kept.append(p)
    if dropped:
        log.info("dropped %d point(s) with sparse series", dropped)
    return (
        PointCloudSeries(series.tile, series.calendar, kept, series.skipped_rows),
        dropped,
    )
