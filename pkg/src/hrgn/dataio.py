"""CSV ingestion, validation and standardization.

File schemas (UTF-8, comma separated, ``.`` decimal, header row required):

``edges.csv``         from_id,to_id,edge_type,stream_distance_m
``drivers.csv``       segment_id,date,f0..f9
``releases.csv``      reservoir_id,date,conservation_m3,direct_m3,spill_m3
``reservoirs.csv``    reservoir_id,dam_height_m,dam_length_m,depth_m,elevation_m,catchment_km2
``observations.csv``  segment_id,date,temp_c
``truth.csv``         segment_id,date,temp_c        (synthetic data only)
``simulation.csv``    segment_id,date,temp_c        (synthetic data only)

Dates are ISO-8601 and become 0-based day indices from the first driver date.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cell import GraphArrays, lag_releases
from .graph import HeteroGraph, build_adjacency, read_edges_csv, write_edges_csv
from .synth import RELEASE_TYPES, META_NAMES, SynthDataset

N_DRIVERS = 10
DRIVER_COLUMNS = tuple(f"f{j}" for j in range(N_DRIVERS))
FILES = ("edges.csv", "drivers.csv", "releases.csv", "reservoirs.csv", "observations.csv")


class LoadError(ValueError):
    pass


@dataclass
class DatasetBundle:
    """Aligned, standardized arrays for one basin.

    Time-major arrays: ``x`` (T, N, D), ``r`` (T, M, 4) with the last column
    the release-availability flag, ``obs`` (T, N) NaN where unobserved.
    Standardization statistics come from days ``< train_end`` only.
    """

    graph: HeteroGraph
    dates: list[str]
    x_raw: np.ndarray
    r_raw: np.ndarray
    meta_raw: np.ndarray
    obs: np.ndarray
    train_end: int
    hidden: tuple[str, ...] = ()
    truth: np.ndarray | None = None
    simulation: np.ndarray | None = None
    stats: dict = field(default_factory=dict)
    x: np.ndarray = field(init=False)
    r: np.ndarray = field(init=False)
    meta: np.ndarray = field(init=False)
    available: np.ndarray = field(init=False)

    def __post_init__(self):
        T, n, _ = self.x_raw.shape
        m = self.r_raw.shape[1]
        if not 0 < self.train_end <= T:
            raise LoadError(f"train_end {self.train_end} outside 1..{T}")
        unknown = set(self.hidden) - set(self.graph.reservoirs)
        if unknown:
            raise LoadError(f"cannot hide unknown reservoirs {sorted(unknown)}")
        if np.isnan(self.x_raw).any():
            raise LoadError("driver array contains NaN")
        avail = np.isfinite(self.r_raw).all(axis=2)
        for k, rid in enumerate(self.graph.reservoirs):
            if rid in self.hidden:
                avail[:, k] = False
        tr = slice(0, self.train_end)
        xm = self.x_raw[tr].reshape(-1, self.x_raw.shape[2]).mean(axis=0)
        xs = _safe_std(self.x_raw[tr].reshape(-1, self.x_raw.shape[2]))
        self.x = (self.x_raw - xm) / xs
        r_fill = np.where(avail[..., None], np.nan_to_num(self.r_raw), np.nan)
        rm = np.zeros(3)
        rs = np.ones(3)
        if m and avail[tr].any():
            flat = r_fill[tr][avail[tr]]
            rm, rs = flat.mean(axis=0), _safe_std(flat)
        r_std = np.where(avail[..., None], (np.nan_to_num(r_fill) - rm) / rs, 0.0)
        self.r = np.concatenate([r_std, avail[..., None].astype(np.float64)], axis=2)
        self.available = avail
        mm = self.meta_raw.mean(axis=0) if m else np.zeros(self.meta_raw.shape[1])
        ms = _safe_std(self.meta_raw) if m else np.ones(self.meta_raw.shape[1])
        self.meta = (self.meta_raw - mm) / ms
        self.stats = {"x_mean": xm, "x_std": xs, "r_mean": rm, "r_std": rs, "meta_mean": mm, "meta_std": ms}
        self.garrays = GraphArrays.from_graph(self.graph)

    @property
    def n_days(self) -> int:
        return self.x.shape[0]

    @property
    def segments(self) -> tuple[str, ...]:
        return self.graph.segments

    @property
    def obs_mask(self) -> np.ndarray:
        return ~np.isnan(self.obs)

    @property
    def r_prev(self) -> np.ndarray:
        return lag_releases(self.r)

    def with_obs(self, obs: np.ndarray) -> "DatasetBundle":
        return DatasetBundle(self.graph, self.dates, self.x_raw, self.r_raw, self.meta_raw, obs, self.train_end,
                             self.hidden, self.truth, self.simulation)

    def with_hidden(self, hidden: Iterable[str]) -> "DatasetBundle":
        return DatasetBundle(self.graph, self.dates, self.x_raw, self.r_raw, self.meta_raw, self.obs, self.train_end,
                             tuple(hidden), self.truth, self.simulation)


def _safe_std(a: np.ndarray) -> np.ndarray:
    s = a.std(axis=0)
    return np.where(s > 0, s, 1.0)


def bundle_from_synth(ds: SynthDataset, train_end: int | None = None, hidden: Sequence[str] = ()) -> DatasetBundle:
    graph = build_adjacency(ds.edges, ds.segments, ds.reservoirs)
    if train_end is None:
        train_end = default_train_end(len(ds.dates))
    return DatasetBundle(graph, list(ds.dates), ds.drivers, ds.releases, ds.reservoir_meta, ds.obs, train_end,
                         tuple(hidden), ds.truth, ds.simulation)


def default_train_end(n_days: int) -> int:
    return int(round(0.75 * n_days))


# --- writing -----------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def write_synth(ds: SynthDataset, out_dir: str | Path) -> list[Path]:
    """Write every CSV of a synthetic dataset; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    def table(name, header, rows):
        p = out / name
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        paths.append(p)

    write_edges_csv(out / "edges.csv", ds.edges)
    paths.append(out / "edges.csv")
    T, n = ds.truth.shape
    table("drivers.csv", ("segment_id", "date") + DRIVER_COLUMNS,
          ([s, ds.dates[t]] + [_fmt(v) for v in ds.drivers[t, i]] for i, s in enumerate(ds.segments) for t in range(T)))
    table("releases.csv", ("reservoir_id", "date") + RELEASE_TYPES,
          ([r, ds.dates[t]] + [_fmt(v) for v in ds.releases[t, k]] for k, r in enumerate(ds.reservoirs) for t in range(T)))
    table("reservoirs.csv", ("reservoir_id",) + META_NAMES,
          ([r] + [_fmt(v) for v in ds.reservoir_meta[k]] for k, r in enumerate(ds.reservoirs)))
    for name, arr in (("observations.csv", ds.obs), ("truth.csv", ds.truth), ("simulation.csv", ds.simulation)):
        table(name, ("segment_id", "date", "temp_c"),
              ([s, ds.dates[t], _fmt(arr[t, i])] for i, s in enumerate(ds.segments) for t in range(T)
               if not np.isnan(arr[t, i])))
    return paths


# --- reading -----------------------------------------------------------------

def _read(path: Path, required: Sequence[str]) -> list[tuple[int, dict]]:
    if not path.exists():
        raise LoadError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(required) <= set(reader.fieldnames):
            raise LoadError(f"{path}: header must contain {list(required)}, got {reader.fieldnames}")
        return [(lineno, row) for lineno, row in enumerate(reader, start=2)]


def _float(path, lineno, row, col) -> float:
    try:
        v = float(row[col])
    except (TypeError, ValueError) as exc:
        raise LoadError(f"{path}:{lineno}: column {col!r} is not a number: {row[col]!r}") from exc
    if np.isnan(v):
        raise LoadError(f"{path}:{lineno}: column {col!r} is NaN")
    return v


def _series(path: Path, id_col: str, value_cols: Sequence[str], ids: Sequence[str], day_of: dict, T: int,
            fill=np.nan, required_complete=False) -> np.ndarray:
    index = {s: i for i, s in enumerate(ids)}
    out = np.full((T, len(ids), len(value_cols)), fill, dtype=np.float64)
    seen = np.zeros((T, len(ids)), dtype=bool)
    for lineno, row in _read(path, (id_col, "date") + tuple(value_cols)):
        key = row[id_col]
        if key not in index:
            raise LoadError(f"{path}:{lineno}: unknown id {key!r}")
        if row["date"] not in day_of:
            raise LoadError(f"{path}:{lineno}: date {row['date']!r} outside the driver date range")
        t, i = day_of[row["date"]], index[key]
        if seen[t, i]:
            raise LoadError(f"{path}:{lineno}: duplicate record for ({key}, {row['date']})")
        seen[t, i] = True
        out[t, i] = [_float(path, lineno, row, c) for c in value_cols]
    if required_complete and not seen.all():
        t, i = np.argwhere(~seen)[0]
        raise LoadError(f"{path}: missing record for ({ids[i]}, day {t})")
    return out


def _date_axis(path: Path) -> list[str]:
    raw = sorted({row["date"] for _, row in _read(path, ("segment_id", "date"))})
    try:
        parsed = [date.fromisoformat(d) for d in raw]
    except ValueError as exc:
        raise LoadError(f"{path}: bad ISO date: {exc}") from exc
    for a, b in zip(parsed, parsed[1:]):
        if (b - a).days != 1:
            raise LoadError(f"{path}: dates are not a contiguous daily axis ({a} -> {b})")
    return [d.isoformat() for d in parsed]


def load_bundle(directory: str | Path, train_end: int | str | None = None, hidden: Sequence[str] = ()) -> DatasetBundle:
    """Load and validate a dataset directory.

    ``train_end`` is a day index or ISO date (first test day); defaults to
    75% of the date axis. Missing release rows become zeros with the
    availability flag cleared, as do all rows of reservoirs in ``hidden``.
    """
    d = Path(directory)
    # canonical edge order so weight statistics do not depend on row order
    edges = sorted(read_edges_csv(d / "edges.csv"), key=lambda e: (e.kind, e.src, e.dst))
    meta_rows = sorted(_read(d / "reservoirs.csv", ("reservoir_id",) + META_NAMES), key=lambda lr: lr[1]["reservoir_id"])
    reservoirs = [row["reservoir_id"] for _, row in meta_rows]
    if len(set(reservoirs)) != len(reservoirs):
        raise LoadError(f"{d / 'reservoirs.csv'}: duplicate reservoir id")
    meta = np.array([[_float(d / "reservoirs.csv", ln, row, c) for c in META_NAMES] for ln, row in meta_rows]).reshape(-1, 5)

    drivers_path = d / "drivers.csv"
    dates = _date_axis(drivers_path)
    day_of = {s: t for t, s in enumerate(dates)}
    segments = sorted({row["segment_id"] for _, row in _read(drivers_path, ("segment_id", "date"))})
    graph = build_adjacency(edges, segments, reservoirs)
    T = len(dates)
    x = _series(drivers_path, "segment_id", DRIVER_COLUMNS, segments, day_of, T, required_complete=True)
    r = _series(d / "releases.csv", "reservoir_id", RELEASE_TYPES, reservoirs, day_of, T)
    obs = _series(d / "observations.csv", "segment_id", ("temp_c",), segments, day_of, T)[..., 0]
    extra = {}
    for name in ("truth", "simulation"):
        p = d / f"{name}.csv"
        extra[name] = _series(p, "segment_id", ("temp_c",), segments, day_of, T)[..., 0] if p.exists() else None
    if train_end is None:
        train_end = default_train_end(T)
    elif isinstance(train_end, str):
        if train_end not in day_of:
            raise LoadError(f"train_end date {train_end} outside the date range")
        train_end = day_of[train_end]
    return DatasetBundle(graph, dates, x, r, meta, obs, int(train_end), tuple(hidden), extra["truth"], extra["simulation"])
