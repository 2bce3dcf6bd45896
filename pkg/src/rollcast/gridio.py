"""Weather-state data model, synthetic geophysical generator, and grid file I/O.

The generator produces a deterministic multi-variable field series on an
equirectangular lat-lon grid: zonal advection (periodic in longitude) plus
diffusion, a seasonal/diurnal cycle, and seeded localized "storm" injections
whose onsets split the series into smooth and abrupt regimes.

Grid file layout (little-endian):
    magic "ARRW", u16 version=1, u16 V, u16 H, u16 W,
    u32 num_steps, u32 base_step_hours, H x f64 latitudes,
    then num_steps frames of V*H*W float32, row-major [v][lat][lon].
A JSON sidecar manifest (<path>.json) carries variable names, split
boundaries, and the generator seed/config.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GRID_MAGIC = b"ARRW"
GRID_VERSION = 1

HOURS_PER_DAY = 24


class GridFileError(IOError):
    """Malformed grid file; message names the byte offset."""


@dataclass(frozen=True)
class GridSpec:
    """Grid geometry: V variables on an H x W equirectangular grid."""

    num_vars: int
    lat_points: int
    lon_points: int
    lat_degrees: tuple
    base_step_hours: int = 6

    def __post_init__(self):
        if self.num_vars < 1:
            raise ValueError(f"num_vars must be >= 1, got {self.num_vars}")
        if self.lat_points < 2 or self.lon_points < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.lat_points}x{self.lon_points}")
        lats = np.asarray(self.lat_degrees, dtype=np.float64)
        if lats.shape != (self.lat_points,):
            raise ValueError(f"expected {self.lat_points} latitudes, got {lats.shape}")
        if np.any(np.diff(lats) >= 0):
            raise ValueError("latitudes must be strictly decreasing (north to south)")
        if np.any(np.abs(lats) > 90.0):
            raise ValueError("latitudes must lie in [-90, 90]")
        if self.base_step_hours < 1:
            raise ValueError("base_step_hours must be positive")
        object.__setattr__(self, "lat_degrees", tuple(float(x) for x in lats))

    @property
    def shape(self) -> tuple:
        return (self.num_vars, self.lat_points, self.lon_points)

    @staticmethod
    def cell_centered(num_vars: int, lat_points: int, lon_points: int, base_step_hours: int = 6) -> "GridSpec":
        """Cell-center latitudes of a regular equirectangular grid, +90 side first."""
        step = 180.0 / lat_points
        lats = 90.0 - step / 2.0 - step * np.arange(lat_points)
        return GridSpec(num_vars, lat_points, lon_points, tuple(lats), base_step_hours)


@dataclass
class GridField:
    """One weather state: values[v][lat][lon] at a timestamp (hours from epoch)."""

    spec: GridSpec
    values: np.ndarray
    timestamp_hours: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.spec.shape:
            raise ValueError(f"values shape {self.values.shape} != spec shape {self.spec.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")


@dataclass
class FieldDelta:
    """Change of state over interval_hours, same layout as GridField values."""

    spec: GridSpec
    values: np.ndarray
    interval_hours: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.spec.shape:
            raise ValueError(f"delta shape {self.values.shape} != spec shape {self.spec.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("delta values must be finite")


@dataclass
class RegimeConfig:
    """Synthetic dynamics knobs; all pure functions of the seed once fixed.

    zonal_velocity_cells: eastward shift in grid cells per base step (per variable,
        cycled if shorter than V). Fractional shifts use periodic linear interpolation.
    diffusion: 5-point Laplacian coefficient per step (longitude periodic,
        latitude edges clamped).
    storm_rate: expected storm onsets per base step; each onset injects a
        localized bump over storm_duration steps.
    seasonal_amplitude / diurnal_amplitude: amplitudes of the deterministic
        cycle added on output, in units of each variable's scale.
    season_length_days: length of the synthetic "year".
    """

    zonal_velocity_cells: tuple = (0.7, 1.1)
    diffusion: float = 0.04
    storm_rate: float = 0.04
    storm_amplitude: float = 2.5
    storm_width_cells: float = 2.0
    storm_duration_steps: int = 4
    seasonal_amplitude: float = 0.6
    diurnal_amplitude: float = 0.15
    season_length_days: int = 60
    var_means: tuple = (280.0, 0.0)
    var_scales: tuple = (8.0, 5.0)
    var_names: tuple = ("temperature", "zonal_wind")
    init_modes: int = 4

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RegimeConfig":
        known = {f.name for f in dataclasses.fields(RegimeConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown RegimeConfig keys: {sorted(unknown)}")
        clean = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return RegimeConfig(**clean)


@dataclass
class Dataset:
    """Ordered field series at base-step spacing plus split tags and metadata."""

    spec: GridSpec
    fields: list
    splits: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        step = self.spec.base_step_hours
        ts = [f.timestamp_hours for f in self.fields]
        for a, b in zip(ts, ts[1:]):
            if b - a != step:
                raise ValueError(f"timestamps must increase by {step}h, got {a} -> {b}")
        if not self.splits:
            self.splits = {"train": (0, len(self.fields))}

    def __len__(self):
        return len(self.fields)

    @property
    def start_hours(self) -> int:
        return self.fields[0].timestamp_hours

    def index_of(self, t_hours: int) -> int:
        step = self.spec.base_step_hours
        off = t_hours - self.start_hours
        idx, rem = divmod(off, step)
        if rem != 0 or not (0 <= idx < len(self.fields)):
            raise IndexError(f"timestamp {t_hours}h not in dataset")
        return int(idx)

    def at(self, t_hours: int) -> GridField:
        return self.fields[self.index_of(t_hours)]

    def split_timestamps(self, name: str) -> list:
        lo, hi = self.splits[name]
        return [f.timestamp_hours for f in self.fields[lo:hi]]

    def values_array(self) -> np.ndarray:
        """All frames stacked as (T, V, H, W)."""
        return np.stack([f.values for f in self.fields])


# -- synthetic dynamics ---------------------------------------------------------


def advect_zonal(plane: np.ndarray, shift_cells: float) -> np.ndarray:
    """Shift a (H, W) plane eastward by a fractional number of cells.

    Semi-Lagrangian with periodic linear interpolation in longitude.
    """
    w = plane.shape[1]
    whole = int(np.floor(shift_cells))
    frac = shift_cells - whole
    rolled = np.roll(plane, whole, axis=1)
    if frac == 0.0:
        return rolled.copy()
    return (1.0 - frac) * rolled + frac * np.roll(rolled, 1, axis=1)


def diffuse(plane: np.ndarray, kappa: float) -> np.ndarray:
    """One explicit diffusion step: longitude periodic, latitude edges clamped."""
    if kappa == 0.0:
        return plane.copy()
    east = np.roll(plane, -1, axis=1)
    west = np.roll(plane, 1, axis=1)
    north = np.vstack([plane[:1], plane[:-1]])
    south = np.vstack([plane[1:], plane[-1:]])
    return plane + kappa * (east + west + north + south - 4.0 * plane)


def _storm_bump(spec: GridSpec, lat_idx: float, lon_idx: float, width: float) -> np.ndarray:
    """Gaussian bump centred at a grid location, wrapping around in longitude."""
    H, W = spec.lat_points, spec.lon_points
    di = np.arange(H)[:, None] - lat_idx
    dj_raw = np.abs(np.arange(W)[None, :] - lon_idx)
    dj = np.minimum(dj_raw, W - dj_raw)
    return np.exp(-(di**2 + dj**2) / (2.0 * width**2))


def _seasonal_cycle(cfg: RegimeConfig, spec: GridSpec, t_hours: int, var: int) -> np.ndarray:
    """Deterministic seasonal and diurnal waves for one variable (H x W).

    Both cycles travel westward in longitude (a thermal-tide analogue), so
    their phase is readable from any single snapshot and the induced change
    of state stays a function of the observable field.
    """
    season_hours = cfg.season_length_days * HOURS_PER_DAY
    phase_season = 2.0 * np.pi * (t_hours % season_hours) / season_hours
    phase_day = 2.0 * np.pi * (t_hours % HOURS_PER_DAY) / HOURS_PER_DAY
    lat = np.radians(np.asarray(spec.lat_degrees))[:, None]
    lon_angle = 2.0 * np.pi * np.arange(spec.lon_points)[None, :] / spec.lon_points
    seasonal = (
        cfg.seasonal_amplitude
        * np.sin(phase_season - lon_angle + 0.5 * var)
        * np.sin(lat)
    )
    diurnal = (
        cfg.diurnal_amplitude
        * np.sin(phase_day - lon_angle + 0.25 * var)
        * np.cos(lat)
    )
    return seasonal + diurnal


def generate_synthetic(
    spec: GridSpec,
    num_steps: int,
    seed: int,
    regime_cfg: RegimeConfig | None = None,
    splits: dict | None = None,
    start_hours: int = 0,
) -> Dataset:
    """Deterministic synthetic dataset; a pure function of (spec, seed, cfg).

    The anomaly core of each variable evolves by advection then diffusion,
    with storm bursts injected at seeded onset times; means, scales and the
    seasonal cycle are applied on output.
    """
    if num_steps < 2:
        raise ValueError(f"num_steps must be >= 2, got {num_steps}")
    cfg = regime_cfg or RegimeConfig()
    if len(cfg.var_means) < spec.num_vars or len(cfg.var_scales) < spec.num_vars:
        raise ValueError(
            f"regime config covers {min(len(cfg.var_means), len(cfg.var_scales))} variables, "
            f"spec needs {spec.num_vars}"
        )
    rng = np.random.default_rng(seed)
    H, W, V = spec.lat_points, spec.lon_points, spec.num_vars

    # smooth initial anomaly: low-wavenumber modes, periodic in longitude
    lon_phase = 2.0 * np.pi * np.arange(W) / W
    lat_axis = np.linspace(0.0, np.pi, H)
    anomaly = np.zeros((V, H, W))
    for v in range(V):
        for _ in range(cfg.init_modes):
            k_lon = rng.integers(1, 4)
            k_lat = rng.integers(1, 3)
            amp = rng.normal(0.5, 0.2)
            ph_lon = rng.uniform(0, 2 * np.pi)
            ph_lat = rng.uniform(0, 2 * np.pi)
            anomaly[v] += amp * np.cos(k_lon * lon_phase[None, :] + ph_lon) * np.cos(
                k_lat * lat_axis[:, None] + ph_lat
            )

    # pre-draw storm schedule so regime structure is explicit in the metadata
    onsets = []
    n_onsets = rng.poisson(cfg.storm_rate * num_steps)
    for _ in range(n_onsets):
        onsets.append(
            {
                "step": int(rng.integers(1, num_steps)),
                "var": int(rng.integers(0, V)),
                "lat": float(rng.uniform(0, H - 1)),
                "lon": float(rng.uniform(0, W)),
                "sign": float(rng.choice([-1.0, 1.0])),
            }
        )
    onsets.sort(key=lambda o: o["step"])

    velocities = [cfg.zonal_velocity_cells[v % len(cfg.zonal_velocity_cells)] for v in range(V)]
    fields = []

    def render(t_step: int) -> GridField:
        t_hours = start_hours + t_step * spec.base_step_hours
        out = np.empty((V, H, W))
        for v in range(V):
            out[v] = (
                cfg.var_means[v]
                + cfg.var_scales[v] * (anomaly[v] + _seasonal_cycle(cfg, spec, t_hours, v))
            )
        # datasets live at float32 precision (the storage format), internals at float64
        return GridField(spec, out.astype(np.float32).astype(np.float64), t_hours)

    fields.append(render(0))
    for t in range(1, num_steps):
        for v in range(V):
            anomaly[v] = diffuse(advect_zonal(anomaly[v], velocities[v]), cfg.diffusion)
        for o in onsets:
            if o["step"] <= t < o["step"] + cfg.storm_duration_steps:
                age = t - o["step"]
                envelope = np.sin(np.pi * (age + 1) / (cfg.storm_duration_steps + 1))
                anomaly[o["var"]] += (
                    o["sign"] * cfg.storm_amplitude * envelope / cfg.storm_duration_steps
                ) * _storm_bump(spec, o["lat"], o["lon"], cfg.storm_width_cells)
        fields.append(render(t))

    names = [cfg.var_names[v] if v < len(cfg.var_names) else f"var{v}" for v in range(V)]
    meta = {
        "seed": int(seed),
        "generator": cfg.to_dict(),
        "variables": names,
        "storm_onsets": [o["step"] for o in onsets],
        "season_length_days": cfg.season_length_days,
    }
    return Dataset(spec, fields, splits=dict(splits) if splits else {}, meta=meta)


def default_splits(num_steps: int, train: float = 0.7, val: float = 0.1) -> dict:
    """Contiguous train/val/test index ranges."""
    n_train = int(num_steps * train)
    n_val = int(num_steps * val)
    return {
        "train": (0, n_train),
        "val": (n_train, n_train + n_val),
        "test": (n_train + n_val, num_steps),
    }


# -- windowing -------------------------------------------------------------------


def window(dataset: Dataset, t0: int, delta: int):
    """(X_0, X_delta, change) for an initial time and interval, both in hours."""
    step = dataset.spec.base_step_hours
    if delta % step != 0:
        raise ValueError(f"delta {delta}h is not a multiple of the base step {step}h")
    x0 = dataset.at(t0)
    x1 = dataset.at(t0 + delta)
    d = FieldDelta(dataset.spec, x1.values - x0.values, delta)
    return x0, x1, d


# -- binary grid file -------------------------------------------------------------


def write_grid_file(path, dataset: Dataset, provenance: dict | None = None):
    """Write the dataset and its JSON sidecar manifest."""
    spec = dataset.spec
    header = struct.pack(
        "<4sHHHHII",
        GRID_MAGIC,
        GRID_VERSION,
        spec.num_vars,
        spec.lat_points,
        spec.lon_points,
        len(dataset.fields),
        spec.base_step_hours,
    )
    lats = np.asarray(spec.lat_degrees, dtype="<f8").tobytes()
    frames = b"".join(
        np.ascontiguousarray(f.values, dtype="<f4").tobytes() for f in dataset.fields
    )
    Path(path).write_bytes(header + lats + frames)

    manifest = {
        "format": {"magic": GRID_MAGIC.decode(), "version": GRID_VERSION},
        "variables": dataset.meta.get(
            "variables", [f"var{v}" for v in range(spec.num_vars)]
        ),
        "splits": {k: list(v) for k, v in dataset.splits.items()},
        "start_hours": dataset.start_hours,
        "seed": dataset.meta.get("seed"),
        "generator": dataset.meta.get("generator"),
        "season_length_days": dataset.meta.get("season_length_days"),
        "storm_onsets": dataset.meta.get("storm_onsets"),
    }
    if provenance:
        manifest["provenance"] = provenance
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2))


def read_grid_file(path) -> Dataset:
    """Read a grid file (and its sidecar manifest when present) back to a Dataset."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != GRID_MAGIC:
        raise GridFileError(f"bad magic {blob[:4]!r} at offset 0")
    header_len = 4 + struct.calcsize("<HHHHII")
    if len(blob) < header_len:
        raise GridFileError(f"header truncated at offset {len(blob)}")
    version, V, H, W, num_steps, base_step = struct.unpack_from("<HHHHII", blob, 4)
    if version != GRID_VERSION:
        raise GridFileError(f"unsupported version {version} at offset 4")
    off = header_len
    lat_bytes = 8 * H
    if len(blob) < off + lat_bytes:
        raise GridFileError(f"latitude block truncated at offset {off}")
    lats = np.frombuffer(blob, dtype="<f8", count=H, offset=off)
    off += lat_bytes
    frame_len = 4 * V * H * W
    need = off + frame_len * num_steps
    if len(blob) < need:
        raise GridFileError(
            f"payload truncated at offset {len(blob)}: header declares {num_steps} frames "
            f"({need} bytes total)"
        )

    manifest_path = Path(str(path) + ".json")
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    start_hours = int(manifest.get("start_hours", 0))

    spec = GridSpec(V, H, W, tuple(lats), base_step)
    fields = []
    for t in range(num_steps):
        frame = np.frombuffer(blob, dtype="<f4", count=V * H * W, offset=off).reshape(V, H, W)
        off += frame_len
        fields.append(GridField(spec, frame.astype(np.float64), start_hours + t * base_step))

    splits = {k: tuple(v) for k, v in manifest.get("splits", {}).items()}
    meta = {
        "variables": manifest.get("variables", [f"var{v}" for v in range(V)]),
        "seed": manifest.get("seed"),
        "generator": manifest.get("generator"),
        "season_length_days": manifest.get("season_length_days"),
        "storm_onsets": manifest.get("storm_onsets"),
    }
    return Dataset(spec, fields, splits=splits, meta=meta)
