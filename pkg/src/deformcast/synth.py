"""Synthetic displacement tiles with analytic ground truth.

Per pixel, the generated truth follows

    d(t) = v * t_yr + A * sin(w * t_days + phi) + S * H(t - t_event) + noise

where v, A, phi and S are smooth random fields realized from a low-order
2-D cosine basis with seeded coefficients, w is the annual frequency and
H the unit step. Four regime presets gate which terms are active:
``trend`` (v only), ``seasonal`` (A only), ``mixed`` (v + A) and
``coseismic`` (v + A + step).

Besides the gridded truth cube, every tile carries an irregular point
sampling of the same analytic field (uniform random locations, optional
missing cells) so the ingest/raster path can be exercised end to end.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np

from . import rng
from .ingest import (
    AcquisitionCalendar,
    PointCloudSeries,
    PointRecord,
    TileId,
    parse_tile_id,
)
from .raster import DisplacementCube, GridSpec

KINDS = ("trend", "seasonal", "mixed", "coseismic")
ANNUAL_OMEGA = 2.0 * np.pi / 365.25  # rad per day
DAYS_PER_YEAR = 365.25


@dataclass(frozen=True)
class RegimeSpec:
    """Generator parameters for one synthetic tile."""

    kind: str = "mixed"
    seed: int = 0
    noise_sigma_mm: float = 0.5
    velocity_mm_yr: float = 5.0      # peak |velocity| of the trend field
    amplitude_mm: float = 3.0        # peak seasonal amplitude
    phase_rad: float = 0.6           # peak |phase| of the seasonal phase field
    step_mm: float = 25.0            # peak co-seismic offset
    step_radius_frac: float = 0.18   # bump radius as a fraction of the extent
    event_epoch: int | None = None   # epoch index of the step (coseismic only)
    basis_order: int = 3
    n_points: int = 800
    missing_fraction: float = 0.02
    height: int = 64
    width: int = 64
    tile: str = "E32N34"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.noise_sigma_mm < 0:
            raise ValueError("noise_sigma_mm must be non-negative")

    def grid(self) -> GridSpec:
        return GridSpec.for_tile(parse_tile_id(self.tile), self.height, self.width)


@dataclass
class SynthTile:
    cube: DisplacementCube
    points: PointCloudSeries
    spec: RegimeSpec
    fields: dict  # realized H x W parameter maps
    coeffs: dict  # cosine-basis coefficient arrays per field
    event_epoch: int | None


def default_calendar(T: int = 120, start: date = date(2018, 1, 5), cadence_days: int = 6):
    return AcquisitionCalendar(
        tuple(start + timedelta(days=cadence_days * k) for k in range(T))
    )


def _eval_basis(coeffs: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Evaluate sum_pq c[p,q] cos(pi p u) cos(pi q v) at matched u, v arrays."""
    P, Q = coeffs.shape
    out = np.zeros_like(u, dtype=np.float64)
    for p in range(P):
        cu = np.cos(np.pi * p * u)
        for q in range(Q):
            out += coeffs[p, q] * cu * np.cos(np.pi * q * v)
    return out


def _smooth_field(gen, order, grid, peak):
    """Random band-limited field scaled so max |value| on the grid = peak.

    Returns (coefficients, H x W realization). Coefficients are rescaled
    along with the field so off-grid evaluations stay consistent.
    """
    c = gen.normal(size=(order + 1, order + 1))
    c /= 1.0 + np.add.outer(np.arange(order + 1), np.arange(order + 1)) ** 2
    u, v = _grid_fractions(grid)
    raw = _eval_basis(c, u, v)
    scale = peak / max(np.abs(raw).max(), 1e-12)
    return c * scale, raw * scale


def _grid_fractions(grid: GridSpec):
    """Pixel-centre (u, v) in [0,1]^2; u follows rows (north at u=0)."""
    u = (np.arange(grid.height) + 0.5) / grid.height
    v = (np.arange(grid.width) + 0.5) / grid.width
    uu, vv = np.meshgrid(u, v, indexing="ij")
    return uu, vv


def _point_fractions(coords, grid: GridSpec):
    e0, n0 = grid.origin_m
    ex, ey = grid.extent_m
    v = (coords[:, 0] - e0) / ex
    u = (n0 + ey - coords[:, 1]) / ey
    return u, v


def hessian_bound(coeffs: np.ndarray, extent_m) -> float:
    """Upper bound on the spectral norm of the field Hessian (per metre^2).

    Conservative: sums the coefficient-wise bounds of f_xx, f_yy and twice
    the mixed term. Used to bound linear-interpolation error as
    (diameter^2 / 2) * bound.
    """
    ex, ey = extent_m
    p = np.arange(coeffs.shape[0])[:, None]
    q = np.arange(coeffs.shape[1])[None, :]
    a = np.abs(coeffs)
    pi2 = np.pi ** 2
    return float(
        pi2 * (a * q**2).sum() / ex**2
        + pi2 * (a * p**2).sum() / ey**2
        + 2.0 * pi2 * (a * p * q).sum() / (ex * ey)
    )


def _realize_fields(spec: RegimeSpec, grid: GridSpec, T: int):
    order = spec.basis_order
    coeffs, fields = {}, {}
    zero = np.zeros((grid.height, grid.width))

    def make(label, peak):
        gen = rng.stream(spec.seed, "field", label)
        return _smooth_field(gen, order, grid, peak)

    use_trend = spec.kind in ("trend", "mixed", "coseismic")
    use_seasonal = spec.kind in ("seasonal", "mixed", "coseismic")

    c, f = make("velocity", spec.velocity_mm_yr)
    coeffs["velocity"] = c if use_trend else np.zeros_like(c)
    fields["velocity"] = f if use_trend else zero.copy()

    c, f = make("amplitude", spec.amplitude_mm)
    # amplitude must stay positive: map the [-peak, peak] field to
    # [0.2 peak, peak]
    amp = spec.amplitude_mm * (0.6 + 0.4 * f / max(spec.amplitude_mm, 1e-12))
    coeffs["amplitude"] = c * 0.4 if use_seasonal else np.zeros_like(c)
    if use_seasonal:
        amp_field = amp
        coeffs["amplitude"][0, 0] += 0.6 * spec.amplitude_mm
    else:
        amp_field = zero.copy()
    fields["amplitude"] = amp_field

    c, f = make("phase", spec.phase_rad)
    coeffs["phase"] = c if use_seasonal else np.zeros_like(c)
    fields["phase"] = f if use_seasonal else zero.copy()

    event = None
    step = zero.copy()
    if spec.kind == "coseismic":
        event = spec.event_epoch if spec.event_epoch is not None else (2 * T) // 3
        if not 1 <= event < T:
            raise ValueError(f"event_epoch must lie in [1, {T - 1}], got {event}")
        gen = rng.stream(spec.seed, "field", "step-center")
        uu, vv = _grid_fractions(grid)
        cu, cv = gen.uniform(0.3, 0.7, size=2)
        r2 = (uu - cu) ** 2 + (vv - cv) ** 2
        step = spec.step_mm * np.exp(-r2 / (2.0 * spec.step_radius_frac**2))
        fields["step_center_uv"] = np.array([cu, cv])
    fields["step"] = step
    return coeffs, fields, event


def _analytic(fields, event, epoch_days, u, v, coeffs):
    """Evaluate the noiseless signal at arbitrary (u, v) for all epochs."""
    vel = _eval_basis(coeffs["velocity"], u, v)
    amp = _eval_basis(coeffs["amplitude"], u, v)
    phase = _eval_basis(coeffs["phase"], u, v)
    t_yr = epoch_days / DAYS_PER_YEAR
    out = (
        vel[None, :] * t_yr[:, None]
        + amp[None, :] * np.sin(ANNUAL_OMEGA * epoch_days[:, None] + phase[None, :])
    )
    if event is not None and "step_center_uv" in fields:
        cu, cv = fields["step_center_uv"]
        # the step bump is Gaussian, not part of the cosine basis
        r2 = (u - cu) ** 2 + (v - cv) ** 2
        bump = fields["step_peak"] * np.exp(-r2 / (2.0 * fields["step_radius"] ** 2))
        gate = (np.arange(len(epoch_days)) >= event).astype(np.float64)
        out += gate[:, None] * bump[None, :]
    return out


def generate_tile(
    spec: RegimeSpec, T: int = 120, calendar: AcquisitionCalendar | None = None
) -> SynthTile:
    """Generate a synthetic tile: gridded truth plus scattered point samples.

    Deterministic for a fixed spec: all randomness flows from seeded
    counter-based streams keyed by (seed, purpose).
    """
    grid = spec.grid()
    if calendar is None:
        calendar = default_calendar(T)
    if len(calendar) != T:
        raise ValueError(f"calendar length {len(calendar)} != T = {T}")
    coeffs, fields, event = _realize_fields(spec, grid, T)
    fields["step_peak"] = spec.step_mm
    fields["step_radius"] = spec.step_radius_frac

    days = calendar.epoch_days
    uu, vv = _grid_fractions(grid)
    signal = _analytic(fields, event, days, uu.ravel(), vv.ravel(), coeffs)
    signal = signal.reshape(T, grid.height, grid.width)
    if spec.noise_sigma_mm > 0:
        noise = rng.stream(spec.seed, "noise").normal(
            0.0, spec.noise_sigma_mm, size=signal.shape
        )
        signal = signal + noise
    cube = DisplacementCube(
        grid=grid, calendar=calendar, values=signal, tile=parse_tile_id(spec.tile)
    )

    gen_pts = rng.stream(spec.seed, "points")
    e0, n0 = grid.origin_m
    ex, ey = grid.extent_m
    coords = np.column_stack(
        [
            gen_pts.uniform(e0, e0 + ex, size=spec.n_points),
            gen_pts.uniform(n0, n0 + ey, size=spec.n_points),
        ]
    )
    pu, pv = _point_fractions(coords, grid)
    pt_signal = _analytic(fields, event, days, pu, pv, coeffs)  # (T, n)
    if spec.noise_sigma_mm > 0:
        pt_signal = pt_signal + rng.stream(spec.seed, "point-noise").normal(
            0.0, spec.noise_sigma_mm, size=pt_signal.shape
        )
    values = pt_signal.T.copy()  # (n, T)
    if spec.missing_fraction > 0:
        holes = (
            rng.stream(spec.seed, "dropout").random(size=values.shape)
            < spec.missing_fraction
        )
        values[holes] = np.nan
    points = PointCloudSeries(
        tile=parse_tile_id(spec.tile),
        calendar=calendar,
        points=[
            PointRecord(coords[k, 0], coords[k, 1], values[k]) for k in range(len(values))
        ],
    )
    return SynthTile(
        cube=cube,
        points=points,
        spec=spec,
        fields=fields,
        coeffs=coeffs,
        event_epoch=event,
    )


def egms_filename(tile: str, first_year: int = 2018, last_year: int = 2022) -> str:
    return f"EGMS_L3_{tile}_100km_U_{first_year}_{last_year}_1.csv"
