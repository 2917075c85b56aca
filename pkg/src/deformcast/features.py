"""Leakage-safe multimodal features for displacement cubes.

Everything fitted here (static indicator maps, normalization statistics)
is computed from the first `train_fraction` of epochs only, so that no
statistic used at training time depends on held-out observations. The
six-channel stack is ordered [displacement, velocity, acceleration,
amplitude, sin, cos].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import date

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .ingest import AcquisitionCalendar
from .raster import DisplacementCube, GridSpec, load_maps, save_maps
from .validation import check_finite, check_same_shape

ANNUAL_OMEGA = 2.0 * np.pi / 365.25  # rad per day
DAYS_PER_YEAR = 365.25

CHANNEL_NAMES = ("displacement", "velocity", "acceleration", "amplitude", "sin", "cos")

STATIC_NAMES = ("velocity", "acceleration", "amplitude")


class FitError(ValueError):
    """Degenerate least-squares design or non-finite pixel series."""


@dataclass(frozen=True)
class SplitSpec:
    """Chronological train/held-out split by a fixed fraction."""

    train_fraction: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(
                f"train_fraction must be in (0, 1), got {self.train_fraction}"
            )

    def train_epoch_count(self, T: int) -> int:
        t_train = int(math.floor(self.train_fraction * T))
        if not 2 <= t_train < T:
            raise ValueError(
                f"train window needs 2 <= T_train < T, got T_train={t_train} "
                f"for T={T}"
            )
        return t_train

    def train_window_count(self, n_windows: int) -> int:
        return int(math.floor(self.train_fraction * n_windows))


@dataclass
class StaticMaps:
    """Training-window per-pixel indicators."""

    velocity: np.ndarray        # mm / year
    acceleration: np.ndarray    # mm / year^2
    amplitude: np.ndarray       # mm

    def stack(self) -> np.ndarray:
        return np.stack([self.velocity, self.acceleration, self.amplitude])


@dataclass
class TemporalEncoding:
    """Per-epoch harmonic day-of-year encoding."""

    sin: np.ndarray
    cos: np.ndarray


@dataclass
class NormStats:
    """Normalization parameters, all fitted on the training window."""

    pixel_mean: np.ndarray   # (H, W)
    pixel_std: np.ndarray    # (H, W), >= sqrt(epsilon)
    static_mean: np.ndarray  # (3,)
    static_std: np.ndarray   # (3,)
    epsilon: float = 1e-6


@dataclass
class MultimodalCube:
    """Normalized T x C x H x W stack with its statistics attached."""

    values: np.ndarray
    stats: NormStats
    calendar: AcquisitionCalendar
    grid: GridSpec
    channel_names: tuple


def harmonic_design(epoch_days: np.ndarray, degree: int = 2, annual: bool = True):
    """Design matrix columns [1, t_yr, t_yr^2?, sin(w t), cos(w t)?].

    The time origin is the first supplied epoch; the polynomial runs in
    years (well-conditioned, mm/yr units), the harmonic in days.
    """
    days = np.asarray(epoch_days, dtype=np.float64)
    t = days - days[0]
    t_yr = t / DAYS_PER_YEAR
    cols = [np.ones_like(t_yr), t_yr]
    if degree >= 2:
        cols.append(t_yr**2)
    if annual:
        cols.append(np.sin(ANNUAL_OMEGA * t))
        cols.append(np.cos(ANNUAL_OMEGA * t))
    return np.column_stack(cols)


def fit_static_indicators(cube: DisplacementCube, split: SplitSpec) -> StaticMaps:
    """Per-pixel OLS of a quadratic trend plus one annual harmonic.

    Fits d(t) = b0 + b1 t_yr + b2 t_yr^2 + a sin(wt) + b cos(wt)
    on the training epochs only; velocity = b1, acceleration = 2 b2,
    amplitude = hypot(a, b).
    """
    t_train = split.train_epoch_count(len(cube.calendar))
    if t_train < 6:
        raise FitError(
            f"static indicator fit needs T_train >= 6 (5 parameters), "
            f"got {t_train}"
        )
    X = harmonic_design(cube.calendar.epoch_days[:t_train])
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        raise FitError(
            f"static indicator design is rank-deficient (rank {rank} of "
            f"{X.shape[1]}) at every pixel, starting with pixel (0, 0)"
        )
    D = cube.values[:t_train].reshape(t_train, -1)
    if not np.all(np.isfinite(D)):
        flat = int(np.argmin(np.isfinite(D).all(axis=0)))
        i, j = divmod(flat, cube.grid.width)
        raise FitError(f"non-finite training series at pixel ({i}, {j})")
    beta, *_ = np.linalg.lstsq(X, D, rcond=None)
    H, W = cube.grid.height, cube.grid.width
    return StaticMaps(
        velocity=beta[1].reshape(H, W).copy(),
        acceleration=(2.0 * beta[2]).reshape(H, W).copy(),
        amplitude=np.hypot(beta[3], beta[4]).reshape(H, W).copy(),
    )


def harmonic_encoding(doy):
    """(sin, cos) of 2 pi doy / 365.25; doy may be fractional."""
    phase = 2.0 * np.pi * np.asarray(doy, dtype=np.float64) / DAYS_PER_YEAR
    return np.sin(phase), np.cos(phase)


def day_of_year(d: date) -> int:
    return (d - date(d.year, 1, 1)).days


def encode_time(calendar: AcquisitionCalendar) -> TemporalEncoding:
    doy = np.array([day_of_year(d) for d in calendar.dates], dtype=np.float64)
    s, c = harmonic_encoding(doy)
    return TemporalEncoding(sin=s, cos=c)


def compute_norm_stats(
    cube: DisplacementCube, static: StaticMaps, split: SplitSpec, epsilon: float = 1e-6
) -> NormStats:
    """Training-window statistics: per-pixel for displacement, spatial per
    static channel. epsilon sits inside the square root, so constant
    series get sigma = sqrt(epsilon) rather than zero."""
    t_train = split.train_epoch_count(len(cube.calendar))
    train = cube.values[:t_train]
    mu = train.mean(axis=0)
    sigma = np.sqrt(((train - mu) ** 2).mean(axis=0) + epsilon)
    stack = static.stack().reshape(3, -1)
    s_mean = stack.mean(axis=1)
    s_std = np.sqrt(stack.var(axis=1) + epsilon)
    return NormStats(
        pixel_mean=mu,
        pixel_std=sigma,
        static_mean=s_mean,
        static_std=s_std,
        epsilon=epsilon,
    )


def normalize(
    cube: DisplacementCube,
    static: StaticMaps,
    encoding: TemporalEncoding,
    stats: NormStats,
) -> MultimodalCube:
    """Assemble the six-channel normalized stack."""
    T = len(cube.calendar)
    H, W = cube.grid.height, cube.grid.width
    check_same_shape("pixel_mean", stats.pixel_mean, "cube map", cube.values[0])
    out = np.empty((T, 6, H, W), dtype=np.float64)
    out[:, 0] = (cube.values - stats.pixel_mean) / stats.pixel_std
    for k, arr in enumerate(static.stack()):
        out[:, 1 + k] = (arr - stats.static_mean[k]) / stats.static_std[k]
    out[:, 4] = encoding.sin[:, None, None]
    out[:, 5] = encoding.cos[:, None, None]
    check_finite("normalized cube", out)
    return MultimodalCube(
        values=out,
        stats=stats,
        calendar=cube.calendar,
        grid=cube.grid,
        channel_names=CHANNEL_NAMES,
    )


def unimodal_view(mm: MultimodalCube) -> MultimodalCube:
    """Displacement-only (C=1) variant of a multimodal cube."""
    return MultimodalCube(
        values=mm.values[:, :1].copy(),
        stats=mm.stats,
        calendar=mm.calendar,
        grid=mm.grid,
        channel_names=CHANNEL_NAMES[:1],
    )


def denormalize(pred, stats: NormStats) -> np.ndarray:
    """Invert the displacement normalization; broadcasts over leading axes."""
    pred = np.asarray(pred, dtype=np.float64)
    return pred * stats.pixel_std + stats.pixel_mean


@dataclass
class SampleSet:
    """Sliding windows over a normalized cube, split chronologically.

    Window i covers epochs [i, i+length) and targets the displacement
    channel at epoch i + length. Inputs are materialized lazily (views),
    so the set stays cheap even for long calendars.
    """

    values: np.ndarray          # (T, C, H, W)
    length: int
    train_count: int
    stats: NormStats
    epoch_days: np.ndarray      # (T,)
    train_fraction: float = 0.8

    @property
    def count(self) -> int:
        return self.values.shape[0] - self.length

    def __len__(self):
        return self.count

    def input(self, i: int) -> np.ndarray:
        return self.values[i : i + self.length]

    def target(self, i: int) -> np.ndarray:
        return self.values[i + self.length, 0]

    def target_epoch(self, i: int) -> int:
        return i + self.length

    def inputs(self, indices) -> np.ndarray:
        return np.stack([self.input(i) for i in indices])

    def targets(self, indices) -> np.ndarray:
        return np.stack([self.target(i) for i in indices])

    def train_indices(self) -> np.ndarray:
        return np.arange(self.train_count)

    def test_indices(self) -> np.ndarray:
        return np.arange(self.train_count, self.count)


def make_windows(mm: MultimodalCube, length: int, split: SplitSpec) -> SampleSet:
    """Cut T - length sliding windows; the first floor(f * (T - length))
    are train, the rest held out, ordered by target epoch."""
    T = mm.values.shape[0]
    if T <= length:
        raise ValueError(f"need T > window length, got T={T}, length={length}")
    count = T - length
    if count < 5:
        raise ValueError(
            f"T - length = {count} windows is too few to split, need >= 5"
        )
    return SampleSet(
        values=mm.values,
        length=length,
        train_count=split.train_window_count(count),
        stats=mm.stats,
        epoch_days=mm.calendar.epoch_days,
        train_fraction=split.train_fraction,
    )


# ---------------------------------------------------------------------------
# container round-trips

def save_static_maps(static: StaticMaps, grid: GridSpec, path) -> None:
    save_maps(static.stack(), list(STATIC_NAMES), grid, path)


def load_static_maps(path) -> StaticMaps:
    stack, names, _ = load_maps(path)
    if list(names) != list(STATIC_NAMES):
        raise ValueError(f"unexpected channels {names} in static-map container")
    return StaticMaps(*stack)


_NORM_CHANNELS = (
    "pixel_mean",
    "pixel_std",
    "static_mean_velocity",
    "static_mean_acceleration",
    "static_mean_amplitude",
    "static_std_velocity",
    "static_std_acceleration",
    "static_std_amplitude",
    "epsilon",
)


def save_norm_stats(stats: NormStats, grid: GridSpec, path) -> None:
    """Persist stats as nine constant-broadcast maps in one container."""
    H, W = grid.height, grid.width
    planes = [stats.pixel_mean, stats.pixel_std]
    planes += [np.full((H, W), v) for v in stats.static_mean]
    planes += [np.full((H, W), v) for v in stats.static_std]
    planes.append(np.full((H, W), stats.epsilon))
    save_maps(np.stack(planes), list(_NORM_CHANNELS), grid, path)


def load_norm_stats(path) -> NormStats:
    stack, names, _ = load_maps(path)
    if list(names) != list(_NORM_CHANNELS):
        raise ValueError(f"unexpected channels {names} in norm-stats container")
    return NormStats(
        pixel_mean=stack[0],
        pixel_std=stack[1],
        static_mean=stack[2:5, 0, 0].copy(),
        static_std=stack[5:8, 0, 0].copy(),
        epsilon=float(stack[8, 0, 0]),
    )


class MultimodalFeaturizer(BaseEstimator, TransformerMixin):
    """Fit train-window statistics on a cube, transform it to model inputs.

    Parameters
    ----------
    train_fraction : float
        Chronological fraction of epochs treated as the training window.
    epsilon : float
        Variance floor inside the normalization square root.
    modality : str
        "multimodal" for the six-channel stack, "unimodal" for
        displacement only.
    """

    def __init__(self, train_fraction=0.8, epsilon=1e-6, modality="multimodal"):
        self.train_fraction = train_fraction
        self.epsilon = epsilon
        self.modality = modality

    def fit(self, X: DisplacementCube, y=None):
        if self.modality not in ("multimodal", "unimodal"):
            raise ValueError(f"unknown modality {self.modality!r}")
        self.split_ = SplitSpec(self.train_fraction)
        self.static_ = fit_static_indicators(X, self.split_)
        self.stats_ = compute_norm_stats(X, self.static_, self.split_, self.epsilon)
        return self

    def transform(self, X: DisplacementCube, stats: NormStats | None = None):
        """Normalize a cube. Passing `stats` applies foreign (e.g. source-
        tile) statistics while keeping this featurizer's static maps."""
        if not hasattr(self, "stats_"):
            raise NotFittedError("MultimodalFeaturizer is not fitted yet")
        mm = normalize(X, self.static_, encode_time(X.calendar), stats or self.stats_)
        if self.modality == "unimodal":
            mm = unimodal_view(mm)
        return mm
