"""Time and geography primitives.

Capture times live on the unit torus as ``(theta, phi)``: ``theta`` is the
normalized time of year, ``phi`` the normalized time of day. Coordinates are
plain latitude/longitude in degrees and are projected with Equal Earth before
encoding.

Every scalar function has an array counterpart (suffix ``_array``) that the
training and evaluation code uses on whole batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .errors import InvalidInputError

DAYS_IN_MONTH = (31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31)
# cumulative days before each month, non-leap calendar
_DAYS_BEFORE = np.concatenate([[0], np.cumsum(DAYS_IN_MONTH)[:-1]])

EARTH_RADIUS_KM = 6371.0

# Equal Earth coefficients (Savric, Patterson & Jenny 2018)
EE_A1 = 1.340264
EE_A2 = -0.081106
EE_A3 = 0.000893
EE_A4 = 0.003796
_EE_M = math.sqrt(3.0) / 2.0

MAX_MONTH_ERR = 6.0
MAX_HOUR_ERR = 12.0


@dataclass(frozen=True)
class DateTuple:
    month: int
    day: int
    hour: int = 0
    minute: int = 0
    second: int = 0

    def __post_init__(self):
        if not 1 <= self.month <= 12:
            raise InvalidInputError(f"month {self.month} outside 1..12", "geotime")
        if not 1 <= self.day <= DAYS_IN_MONTH[self.month - 1]:
            raise InvalidInputError(
                f"day {self.day} invalid for month {self.month}", "geotime"
            )
        if not (0 <= self.hour <= 23 and 0 <= self.minute <= 59 and 0 <= self.second <= 59):
            raise InvalidInputError(
                f"time {self.hour:02d}:{self.minute:02d}:{self.second:02d} out of range",
                "geotime",
            )


@dataclass(frozen=True)
class CyclicTime:
    theta: float
    phi: float

    def __post_init__(self):
        for name in ("theta", "phi"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise InvalidInputError(f"{name}={v} outside [0, 1)", "geotime")

    @classmethod
    def wrap(cls, theta: float, phi: float) -> "CyclicTime":
        return cls(_wrap_unit(theta), _wrap_unit(phi))


@dataclass(frozen=True)
class GeoCoord:
    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise InvalidInputError(f"latitude {self.lat} outside [-90, 90]", "geotime")
        if not -180.0 <= self.lon <= 180.0:
            raise InvalidInputError(f"longitude {self.lon} outside [-180, 180]", "geotime")


@dataclass(frozen=True)
class ProjectedCoord:
    x: float
    y: float


def _wrap_unit(v: float) -> float:
    w = v % 1.0
    # -1e-18 % 1.0 rounds to exactly 1.0
    return 0.0 if w >= 1.0 else w


def wrap_unit_array(v: np.ndarray) -> np.ndarray:
    w = np.mod(v, 1.0)
    return np.where(w >= 1.0, 0.0, w).astype(np.asarray(v).dtype, copy=False)


# ---------------------------------------------------------------------------
# calendar
# ---------------------------------------------------------------------------

def days_in_month(m: int) -> int:
    if not 1 <= m <= 12:
        raise InvalidInputError(f"month {m} outside 1..12", "geotime")
    return DAYS_IN_MONTH[m - 1]


def unix2tuple(ts: int) -> DateTuple:
    """Decompose a UTC unix timestamp, dropping the year.

    Feb 29 is clamped to Feb 28 so that every tuple fits a 365-day calendar.
    """
    if ts < 0:
        raise InvalidInputError(f"negative timestamp {ts}", "geotime")
    dt = datetime.fromtimestamp(int(ts), tz=timezone.utc)
    day = 28 if (dt.month == 2 and dt.day == 29) else dt.day
    return DateTuple(dt.month, day, dt.hour, dt.minute, dt.second)


def unix2tuple_array(ts) -> np.ndarray:
    """Vectorized :func:`unix2tuple`; returns an ``(n, 5)`` int array."""
    ts = np.asarray(ts, dtype=np.int64)
    if np.any(ts < 0):
        raise InvalidInputError("negative timestamp", "geotime")
    days, sod = np.divmod(ts, 86400)
    d = days.astype("datetime64[D]")
    months = d.astype("datetime64[M]")
    month = (months.astype(np.int64) % 12) + 1
    day = (d - months.astype("datetime64[D]")).astype(np.int64) + 1
    day = np.where((month == 2) & (day == 29), 28, day)
    hour, rem = np.divmod(sod, 3600)
    minute, second = np.divmod(rem, 60)
    return np.stack([month, day, hour, minute, second], axis=-1)


def tuple2cyclic(d: DateTuple) -> CyclicTime:
    theta = ((d.month - 1) + (d.day - 1) / DAYS_IN_MONTH[d.month - 1]) / 12.0
    phi = (d.hour + d.minute / 60.0 + d.second / 3600.0) / 24.0
    return CyclicTime(theta, phi)


def tuple2cyclic_daily(d: DateTuple) -> CyclicTime:
    """Day-of-year variant: ``theta`` counts elapsed days over 365."""
    theta = (d.day - 1 + int(_DAYS_BEFORE[d.month - 1])) / 365.0
    phi = (d.hour + d.minute / 60.0 + d.second / 3600.0) / 24.0
    return CyclicTime(theta, phi)


def tuples_to_cyclic_array(t: np.ndarray, scale: str = "monthly") -> np.ndarray:
    t = np.asarray(t)
    month, day, hour, minute, second = (t[..., k].astype(np.float64) for k in range(5))
    mi = t[..., 0].astype(np.int64) - 1
    if scale == "monthly":
        theta = (mi + (day - 1) / np.asarray(DAYS_IN_MONTH, dtype=np.float64)[mi]) / 12.0
    elif scale == "daily":
        theta = (day - 1 + _DAYS_BEFORE[mi]) / 365.0
    else:
        raise InvalidInputError(f"unknown time scale {scale!r}", "geotime")
    phi = (hour + minute / 60.0 + second / 3600.0) / 24.0
    return np.stack([theta, phi], axis=-1)


def unix2cyclic(ts: int, scale: str = "monthly") -> CyclicTime:
    d = unix2tuple(ts)
    if scale == "monthly":
        return tuple2cyclic(d)
    if scale == "daily":
        return tuple2cyclic_daily(d)
    raise InvalidInputError(f"unknown time scale {scale!r}", "geotime")


def unix2cyclic_array(ts, scale: str = "monthly") -> np.ndarray:
    """Timestamps to an ``(n, 2)`` float64 array of ``(theta, phi)``."""
    return tuples_to_cyclic_array(unix2tuple_array(ts), scale)


# ---------------------------------------------------------------------------
# distances on the torus
# ---------------------------------------------------------------------------

def toroidal_distance(a: CyclicTime, b: CyclicTime) -> float:
    dt = abs(a.theta - b.theta)
    dp = abs(a.phi - b.phi)
    dt = min(1.0 - dt, dt)
    dp = min(1.0 - dp, dp)
    # hypot avoids underflow for tiny separations, keeping d == 0 iff a == b
    return math.hypot(dt, dp)


def toroidal_distance_matrix(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Pairwise torus distances between rows of ``(n, 2)`` and ``(m, 2)`` arrays."""
    b = a if b is None else b
    diff = np.abs(a[:, None, :] - b[None, :, :])
    diff = np.minimum(1.0 - diff, diff)
    return np.hypot(diff[..., 0], diff[..., 1])


def euclidean_distance_matrix(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Plain l2 distance on raw ``(theta, phi)``; ignores the wrap."""
    b = a if b is None else b
    diff = a[:, None, :] - b[None, :, :]
    return np.hypot(diff[..., 0], diff[..., 1])


def cyclic_abs_error(pred: CyclicTime, truth: CyclicTime) -> tuple[float, float]:
    """Wrap-around error as ``(months, hours)``."""
    dt = abs(pred.theta - truth.theta)
    dp = abs(pred.phi - truth.phi)
    return 12.0 * min(dt, 1.0 - dt), 24.0 * min(dp, 1.0 - dp)


def cyclic_abs_error_array(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64))
    d = np.minimum(d, 1.0 - d)
    return 12.0 * d[..., 0], 24.0 * d[..., 1]


def tps(mean_month_err: float, mean_hour_err: float) -> float:
    """Time prediction score in [0, 1]; 1 is perfect.

    Month error is normalized by its cyclic maximum of 6, hour error by 12.
    """
    if not 0.0 <= mean_month_err <= MAX_MONTH_ERR:
        raise InvalidInputError(f"month error {mean_month_err} outside [0, 6]", "geotime")
    if not 0.0 <= mean_hour_err <= MAX_HOUR_ERR:
        raise InvalidInputError(f"hour error {mean_hour_err} outside [0, 12]", "geotime")
    em = mean_month_err / MAX_MONTH_ERR
    eh = mean_hour_err / MAX_HOUR_ERR
    return 1.0 - math.sqrt((em * em + eh * eh) / 2.0)


# ---------------------------------------------------------------------------
# geography
# ---------------------------------------------------------------------------

def _ee_forward(lat_rad, lon_rad):
    theta = np.arcsin(_EE_M * np.sin(lat_rad))
    t2 = theta * theta
    t6 = t2 * t2 * t2
    x = (2.0 * math.sqrt(3.0) * lon_rad * np.cos(theta)
         / (3.0 * (9.0 * EE_A4 * t6 * t2 + 7.0 * EE_A3 * t6 + 3.0 * EE_A2 * t2 + EE_A1)))
    y = EE_A4 * t6 * t2 * theta + EE_A3 * t6 * theta + EE_A2 * t2 * theta + EE_A1 * theta
    return x, y


# extent of the unit-sphere projection: x at (0, 180), y at the pole
EE_X_MAX = float(_ee_forward(0.0, math.pi)[0])
EE_Y_MAX = float(_ee_forward(math.pi / 2.0, 0.0)[1])


def equal_earth_project(g: GeoCoord, rescale: bool = True) -> ProjectedCoord:
    """Equal Earth forward projection on the unit sphere.

    With ``rescale`` (the encoder convention) both axes are divided by their
    extent so the map fills ``[-1, 1]^2``.
    """
    x, y = _ee_forward(math.radians(g.lat), math.radians(g.lon))
    if rescale:
        return ProjectedCoord(float(x) / EE_X_MAX, float(y) / EE_Y_MAX)
    return ProjectedCoord(float(x), float(y))


def equal_earth_array(latlon: np.ndarray, rescale: bool = True) -> np.ndarray:
    latlon = np.asarray(latlon, dtype=np.float64)
    x, y = _ee_forward(np.radians(latlon[..., 0]), np.radians(latlon[..., 1]))
    if rescale:
        x = x / EE_X_MAX
        y = y / EE_Y_MAX
    return np.stack([x, y], axis=-1)


def geodesic_km(a: GeoCoord, b: GeoCoord) -> float:
    """Haversine great-circle distance on a 6371 km sphere."""
    p1, p2 = math.radians(a.lat), math.radians(b.lat)
    dp = p2 - p1
    dl = math.radians(b.lon - a.lon)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def geodesic_km_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.radians(np.asarray(a, dtype=np.float64))
    b = np.radians(np.asarray(b, dtype=np.float64))
    dp = b[..., 0] - a[..., 0]
    dl = b[..., 1] - a[..., 1]
    h = np.sin(dp / 2) ** 2 + np.cos(a[..., 0]) * np.cos(b[..., 0]) * np.sin(dl / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(h)))
