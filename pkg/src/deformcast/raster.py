"""Rasterization of irregular point series onto a regular grid.

Each epoch is interpolated independently on a shared Delaunay
triangulation: barycentric-linear inside the convex hull of the points,
nearest-neighbour outside it. Grids follow image convention: row 0 is
the northernmost row, and the sample location of a pixel is its centre.

Cubes and map stacks are stored in a small binary container (magic
``DEFCUBE1``): an 8-line ASCII header followed by raw little-endian
float64 values.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator
from scipy.spatial import Delaunay, QhullError

from .ingest import AcquisitionCalendar, PointCloudSeries, TileId, clean_series
from .validation import check_finite, check_shape

CUBE_MAGIC = "DEFCUBE1"


class GeometryError(ValueError):
    """Degenerate point geometry (collinear or too few points)."""


def worker_count() -> int:
    """Worker cap from the DEFORM_THREADS environment variable (default 1)."""
    try:
        return max(1, int(os.environ.get("DEFORM_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class GridSpec:
    """Regular pixel grid over a rectangular extent.

    origin_m is the lower-left (south-west) corner; row index 0 of any
    raster holds the northernmost pixels.
    """

    height: int = 64
    width: int = 64
    origin_m: tuple[float, float] = (0.0, 0.0)
    extent_m: tuple[float, float] = (100_000.0, 100_000.0)

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ValueError(
                f"grid must be at least 2x2, got {self.height}x{self.width}"
            )
        if not (self.extent_m[0] > 0 and self.extent_m[1] > 0):
            raise ValueError(f"grid extent must be positive, got {self.extent_m}")

    @classmethod
    def for_tile(cls, tile: TileId, height: int = 64, width: int = 64) -> "GridSpec":
        return cls(height, width, tile.origin_m, tile.extent_m)

    @property
    def pixel_size_m(self) -> tuple[float, float]:
        return (self.extent_m[0] / self.width, self.extent_m[1] / self.height)

    def pixel_centers(self) -> np.ndarray:
        """(H*W, 2) array of (easting, northing) pixel-centre coordinates."""
        dx, dy = self.pixel_size_m
        e0, n0 = self.origin_m
        east = e0 + (np.arange(self.width) + 0.5) * dx
        north = n0 + self.extent_m[1] - (np.arange(self.height) + 0.5) * dy
        ee, nn = np.meshgrid(east, north)
        return np.column_stack([ee.ravel(), nn.ravel()])


@dataclass
class DisplacementCube:
    """T x H x W gridded vertical displacement in mm, free of missing values."""

    grid: GridSpec
    calendar: AcquisitionCalendar
    values: np.ndarray
    tile: TileId | None = None

    def __post_init__(self):
        check_shape(
            "cube values",
            self.values,
            (len(self.calendar), self.grid.height, self.grid.width),
        )
        check_finite("cube values", self.values)


def triangulate(coords: np.ndarray) -> Delaunay:
    """Delaunay triangulation of an (n, 2) coordinate set.

    Raises GeometryError when the points are all collinear or fewer
    than three.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError(f"coords: expected (n, 2), got {coords.shape}")
    if len(coords) < 3:
        raise GeometryError(f"triangulation needs >= 3 points, got {len(coords)}")
    try:
        tri = Delaunay(coords)
    except QhullError as exc:
        raise GeometryError(f"degenerate point geometry: {exc}") from exc
    if tri.simplices.size == 0:
        raise GeometryError("degenerate point geometry: all points collinear")
    return tri


def interpolate_epoch(
    coords: np.ndarray,
    values: np.ndarray,
    grid: GridSpec,
    tri: Delaunay | None = None,
) -> np.ndarray:
    """Interpolate one epoch of point values onto the grid.

    Inside the convex hull: barycentric-linear on the triangulation.
    Outside: the value of the geometrically nearest point.
    """
    values = np.asarray(values, dtype=np.float64)
    if tri is None:
        tri = triangulate(coords)
    check_finite("point values", values)
    lin = LinearNDInterpolator(tri, values)
    targets = grid.pixel_centers()
    out = lin(targets)
    hole = np.isnan(out)
    if hole.any():
        near = NearestNDInterpolator(tri.points, values)
        out[hole] = near(targets[hole])
    return out.reshape(grid.height, grid.width)


def rasterize_cube(series: PointCloudSeries, grid: GridSpec) -> DisplacementCube:
    """Rasterize every epoch of a point series on a shared triangulation.

    Sparse points are dropped and remaining gaps filled first (see
    ingest.clean_series). Per-epoch interpolation may run on up to
    DEFORM_THREADS workers; the result does not depend on the schedule.
    """
    dense, _ = clean_series(series)
    if not dense.points:
        raise GeometryError("no points left after dropping sparse series")
    coords = dense.coords()
    tri = triangulate(coords)
    data = dense.matrix()  # (n, T)
    T = len(dense.calendar)
    maps = [None] * T

    def work(t):
        maps[t] = interpolate_epoch(coords, data[:, t], grid, tri)

    workers = worker_count()
    if workers == 1:
        for t in range(T):
            work(t)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, range(T)))
    return DisplacementCube(
        grid=grid,
        calendar=dense.calendar,
        values=np.stack(maps),
        tile=dense.tile,
    )


# ---------------------------------------------------------------------------
# DEFCUBE1 container

def _write_container(path: Path, stack, grid, dates_line, channels_line):
    stack = np.ascontiguousarray(stack, dtype=np.float64)
    header = "\n".join(
        [
            CUBE_MAGIC,
            f"count {stack.shape[0]}",
            f"height {grid.height}",
            f"width {grid.width}",
            f"origin {float(grid.origin_m[0])!r} {float(grid.origin_m[1])!r}",
            f"extent {float(grid.extent_m[0])!r} {float(grid.extent_m[1])!r}",
            f"dates {dates_line}",
            f"channels {channels_line}",
        ]
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(stack.astype("<f8").tobytes())


def _read_container(path: Path):
    with open(path, "rb") as fh:
        lines = [fh.readline().decode("ascii").rstrip("\n") for _ in range(8)]
        payload = fh.read()
    if lines[0] != CUBE_MAGIC:
        raise ValueError(f"{path}: bad magic {lines[0]!r}, expected {CUBE_MAGIC}")
    fields = {}
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        fields[key] = rest
    count = int(fields["count"])
    grid = GridSpec(
        height=int(fields["height"]),
        width=int(fields["width"]),
        origin_m=tuple(float(x) for x in fields["origin"].split()),
        extent_m=tuple(float(x) for x in fields["extent"].split()),
    )
    stack = np.frombuffer(payload, dtype="<f8")
    expected = count * grid.height * grid.width
    if stack.size != expected:
        raise ValueError(
            f"{path}: payload holds {stack.size} values, expected {expected}"
        )
    stack = stack.reshape(count, grid.height, grid.width).copy()
    return stack, grid, fields["dates"], fields["channels"]


def save_cube(cube: DisplacementCube, path) -> None:
    """Write a cube plus a sidecar text file listing acquisition dates."""
    path = Path(path)
    dates_name = path.name + ".dates.txt"
    with open(path.parent / dates_name, "w", encoding="ascii") as fh:
        for d in cube.calendar.dates:
            fh.write(d.isoformat() + "\n")
    tile_line = cube.tile.raw if cube.tile is not None else "-"
    _write_container(path, cube.values, cube.grid, dates_name, f"tile={tile_line}")


def load_cube(path) -> DisplacementCube:
    path = Path(path)
    stack, grid, dates_name, channels = _read_container(path)
    if dates_name == "-":
        raise ValueError(f"{path}: container has no date list, not a cube")
    with open(path.parent / dates_name, encoding="ascii") as fh:
        dates = tuple(
            datetime.strptime(s.strip(), "%Y-%m-%d").date()
            for s in fh
            if s.strip()
        )
    tile = None
    if channels.startswith("tile=") and channels != "tile=-":
        from .ingest import parse_tile_id

        tile = parse_tile_id(channels[len("tile="):])
    return DisplacementCube(
        grid=grid, calendar=AcquisitionCalendar(dates), values=stack, tile=tile
    )


def save_maps(stack: np.ndarray, names: list[str], grid: GridSpec, path) -> None:
    """Write a named stack of H x W maps (static indicators, norm stats)."""
    stack = np.asarray(stack, dtype=np.float64)
    check_shape("map stack", stack, (len(names), grid.height, grid.width))
    if any("," in n or " " in n for n in names):
        raise ValueError("channel names must not contain commas or spaces")
    _write_container(Path(path), stack, grid, "-", ",".join(names))


def load_maps(path):
    stack, grid, _, channels = _read_container(Path(path))
    names = channels.split(",") if channels != "-" else []
    return stack, names, grid


def export_epoch_csv(cube: DisplacementCube, epoch: int, path) -> None:
    """Debug helper: dump one epoch as a dense CSV of pixel values."""
    np.savetxt(path, cube.values[epoch], delimiter=",")
