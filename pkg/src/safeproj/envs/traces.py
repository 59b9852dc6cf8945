"""Fixed-cadence disturbance traces: synthesis, CSV round-trip and forecasts."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

DEFAULT_START = "2017-01-01T00:00:00"


class TraceError(ValueError):
    pass


@dataclass
class TraceSet:
    """Named columns sampled every ``cadence_s`` seconds from ``start``."""

    start: np.datetime64
    cadence_s: int
    columns: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.start = np.datetime64(self.start, "s")
        self.cadence_s = int(self.cadence_s)
        if self.cadence_s <= 0:
            raise TraceError("cadence must be positive")
        lengths = {k: len(v) for k, v in self.columns.items()}
        if len(set(lengths.values())) > 1:
            raise TraceError(f"columns have different lengths: {lengths}")
        self.columns = {k: np.asarray(v, dtype=np.float64) for k, v in self.columns.items()}

    def __len__(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    @property
    def names(self) -> list:
        return list(self.columns)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def timestamps(self) -> np.ndarray:
        return self.start + np.arange(len(self)) * np.timedelta64(self.cadence_s, "s")

    def timestamp(self, k: int) -> np.datetime64:
        return self.start + np.timedelta64(int(k) * self.cadence_s, "s")

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        """Stack the named columns as an (N, len(names)) array."""
        return np.stack([self.columns[n] for n in names], axis=1)

    def forecast(self, names: Sequence[str], k: int, T: int, mode: str = "perfect") -> np.ndarray:
        """Forecast rows k..k+T-1 of the named columns, shape (T, len(names)).

        Row 0 (the present) is always the true value.  ``perfect`` returns the
        true future; ``persistence`` repeats the present.  Indices past the
        end of the trace repeat the last sample.
        """
        n = len(self)
        if not 0 <= k < n:
            raise IndexError(f"forecast origin {k} outside trace of length {n}")
        M = self.matrix(names)
        if mode == "perfect":
            idx = np.minimum(np.arange(k, k + T), n - 1)
            return M[idx]
        if mode == "persistence":
            return np.repeat(M[k][None, :], T, axis=0)
        raise ValueError(f"unknown forecast mode {mode!r}")

    def slice(self, lo: int, hi: int) -> "TraceSet":
        return TraceSet(self.timestamp(lo), self.cadence_s,
                        {k: v[lo:hi].copy() for k, v in self.columns.items()})

    def resample_mean(self, factor: int) -> "TraceSet":
        """Block averages over ``factor`` consecutive samples."""
        n = len(self) // factor
        return TraceSet(self.start, self.cadence_s * factor,
                        {k: v[:n * factor].reshape(n, factor).mean(axis=1)
                         for k, v in self.columns.items()})

    # ------------------------------------------------------------------ CSV

    def to_csv(self, path_or_buf, comments: Iterable[str] = (), fmt: str = "%.10g") -> None:
        """Write ``timestamp,<col>...`` with ISO-8601 timestamps.

        ``comments`` become leading ``# ...`` lines (metadata).
        """
        names = self.names
        data = self.matrix(names) if names else np.zeros((len(self), 0))
        stamps = np.datetime_as_string(self.timestamps(), unit="s")
        lines = [f"# {c}" for c in comments]
        lines.append(",".join(["timestamp"] + names))
        row_fmt = ",".join(["%s"] + [fmt] * len(names))
        buf = io.StringIO()
        buf.write("\n".join(lines) + "\n")
        for s, row in zip(stamps, data):
            buf.write(row_fmt % (s, *row) + "\n")
        text = buf.getvalue()
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w", newline="") as fh:
                fh.write(text)

    @classmethod
    def from_csv(cls, path_or_buf) -> "TraceSet":
        if hasattr(path_or_buf, "read"):
            text = path_or_buf.read()
        else:
            with open(path_or_buf, newline="") as fh:
                text = fh.read()
        rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].startswith("#")]
        if not rows or rows[0][0] != "timestamp":
            raise TraceError("trace CSV must start with a 'timestamp' header column")
        names = rows[0][1:]
        body = rows[1:]
        if len(body) < 1:
            raise TraceError("trace CSV has no data rows")
        try:
            stamps = np.array([r[0] for r in body], dtype="datetime64[s]")
            data = np.array([[float(x) for x in r[1:]] for r in body], dtype=np.float64)
        except ValueError as exc:
            raise TraceError(f"malformed trace CSV: {exc}") from exc
        if data.shape[1] != len(names):
            raise TraceError("row width does not match header")
        if len(stamps) > 1:
            d = np.diff(stamps).astype(np.int64)
            if np.any(d <= 0):
                raise TraceError("timestamps must be strictly increasing")
            if np.any(d != d[0]):
                bad = int(np.argmax(d != d[0]))
                raise TraceError(f"irregular cadence or gap after row {bad}")
            cadence = int(d[0])
        else:
            cadence = 1
        return cls(stamps[0], cadence, {n: data[:, i] for i, n in enumerate(names)})


# ------------------------------------------------------------- synthesis

def occupancy_schedule(stamps: np.ndarray, start_hour: float = 8.0, end_hour: float = 18.0,
                       weekdays_only: bool = True) -> np.ndarray:
    """1.0 during occupied hours, else 0.0."""
    stamps = np.asarray(stamps, dtype="datetime64[s]")
    secs = (stamps - stamps.astype("datetime64[D]")).astype(np.int64)
    hour = secs / 3600.0
    # 1970-01-01 was a Thursday; weekday 0 = Monday
    weekday = (stamps.astype("datetime64[D]").astype(np.int64) + 3) % 7
    occ = (hour >= start_hour) & (hour < end_hour)
    if weekdays_only:
        occ &= weekday < 5
    return occ.astype(np.float64)


def hour_of_day(stamps: np.ndarray) -> np.ndarray:
    stamps = np.asarray(stamps, dtype="datetime64[s]")
    return (stamps - stamps.astype("datetime64[D]")).astype(np.int64) / 3600.0


def day_of_year(stamps: np.ndarray) -> np.ndarray:
    stamps = np.asarray(stamps, dtype="datetime64[s]")
    year0 = stamps.astype("datetime64[Y]").astype("datetime64[D]")
    return (stamps.astype("datetime64[D]") - year0).astype(np.int64)


def _smooth_noise(rng, n: int, knot_every: int, std: float = 1.0) -> np.ndarray:
    """Smooth noise: AR(1) knots joined by linear interpolation."""
    n_knots = n // knot_every + 2
    e = rng.normal(size=n_knots)
    knots = np.empty(n_knots)
    knots[0] = e[0]
    phi = 0.8
    for i in range(1, n_knots):
        knots[i] = phi * knots[i - 1] + np.sqrt(1 - phi ** 2) * e[i]
    t = np.arange(n) / knot_every
    return std * np.interp(t, np.arange(n_knots), knots)


@dataclass
class SolarShape:
    sunrise: float = 6.5
    sunset: float = 18.5
    peak_min: float = 850.0
    peak_max: float = 1000.0
    cloud_depth: float = 0.35

    @property
    def daily_peak_bounds(self):
        return self.peak_min * (1.0 - self.cloud_depth), self.peak_max


def _irradiance(rng, stamps, shape: SolarShape, knot_s: int, cadence_s: int) -> np.ndarray:
    hours = hour_of_day(stamps)
    day = (stamps.astype("datetime64[D]") - stamps[0].astype("datetime64[D]")).astype(np.int64)
    n_days = int(day[-1]) + 1
    peaks = rng.uniform(shape.peak_min, shape.peak_max, size=n_days)
    frac = (hours - shape.sunrise) / (shape.sunset - shape.sunrise)
    envelope = np.clip(np.sin(np.pi * frac), 0.0, None) * ((frac > 0) & (frac < 1))
    cloud = 0.5 * (1.0 + np.tanh(_smooth_noise(rng, len(stamps), max(1, knot_s // cadence_s))))
    factor = 1.0 - shape.cloud_depth * cloud
    return np.clip(peaks[day] * envelope * factor, 0.0, None)


def synth_building_traces(seed: int, days: int, cadence_s: int = 300,
                          start: str = DEFAULT_START, t_mean=(-3.0, 6.0), t_diurnal: float = 4.0,
                          t_noise: float = 4.0, solar_peak=(250.0, 550.0),
                          occupancy_hours=(8.0, 18.0)) -> TraceSet:
    """Outdoor temperature (C), horizontal solar (W/m^2) and occupancy.

    The seasonal mean ramps linearly from ``t_mean[0]`` to ``t_mean[1]``
    over 90 days (a January-to-March heating season).
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    rng = np.random.default_rng([seed, 1])
    n = days * 86400 // cadence_s
    stamps = np.datetime64(start, "s") + np.arange(n) * np.timedelta64(cadence_s, "s")
    t_days = np.arange(n) * cadence_s / 86400.0
    hours = hour_of_day(stamps)
    seasonal = t_mean[0] + (t_mean[1] - t_mean[0]) * np.clip(t_days / 90.0, 0, 1)
    diurnal = t_diurnal * np.sin(2 * np.pi * (hours - 9.0) / 24.0)
    weather = _smooth_noise(rng, n, max(1, 6 * 3600 // cadence_s), std=t_noise)
    t_out = seasonal + diurnal + weather
    shape = SolarShape(7.5, 17.0, solar_peak[0], solar_peak[1], 0.6)
    solar = _irradiance(rng, stamps, shape, 3600, cadence_s)
    occ = occupancy_schedule(stamps, *occupancy_hours)
    return TraceSet(stamps[0], cadence_s, {"t_out": t_out, "solar": solar, "occ": occ})


def synth_feeder_traces(seed: int, days: int, n_bus: int, pv_buses: Sequence[int],
                        cadence_s: int = 1, start: str = "2017-06-01T00:00:00",
                        load_base=(0.0012, 0.0036), load_noise: float = 0.05,
                        solar: Optional[SolarShape] = None) -> TraceSet:
    """Per-bus active load (p.u.) and per-PV irradiance (W/m^2) at ``cadence_s``.

    Irradiance shares a feeder-wide cloud pattern with small local
    variation; loads follow a residential two-peak profile with smooth noise.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    solar = solar or SolarShape()
    rng = np.random.default_rng([seed, 2])
    n = days * 86400 // cadence_s
    stamps = np.datetime64(start, "s") + np.arange(n) * np.timedelta64(cadence_s, "s")
    hours = hour_of_day(stamps)
    cols = {}
    base = rng.uniform(*load_base, size=n_bus)
    profile = (0.55 + 0.25 * np.exp(-((hours - 8.0) / 2.0) ** 2)
               + 0.45 * np.exp(-((hours - 19.5) / 2.5) ** 2))
    common = _smooth_noise(rng, n, max(1, 600 // cadence_s), std=load_noise)
    for i in range(n_bus):
        local = _smooth_noise(rng, n, max(1, 120 // cadence_s), std=load_noise)
        cols[f"load_{i}"] = base[i] * profile * (1.0 + common + local)
    shared = _irradiance(rng, stamps, solar, 300, cadence_s)
    for j in pv_buses:
        local = 1.0 + 0.03 * _smooth_noise(rng, n, max(1, 60 // cadence_s))
        cols[f"irr_{j}"] = np.clip(shared * local, 0.0, solar.peak_max)
    return TraceSet(stamps[0], cadence_s, cols)
