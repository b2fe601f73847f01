"""Datasets on disk, synthetic generation, augmentation and splits.

A dataset is a directory with three files::

    manifest.json    backbone name/dim, sample count, file names
    samples.csv      id, lat, lon, unix_ts, source_id[, split][, filtered]
    embeddings.bin   GTEM blob: one backbone vector per CSV row, same order

The GTEM blob is little-endian: ``b"GTEM"``, u32 version, u32 count, u32 dim,
then ``count * dim`` float32 values.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, InvalidInputError
from .geotime import equal_earth_array, unix2cyclic_array, wrap_unit_array

EMB_MAGIC = b"GTEM"
EMB_VERSION = 1
MANIFEST_NAME = "manifest.json"
CSV_COLUMNS = ["id", "lat", "lon", "unix_ts", "source_id"]
KM_PER_DEGREE = 111.32
# 2015-01-01T00:00:00Z, a non-leap year
SYNTH_YEAR_START = 1420070400


# ---------------------------------------------------------------------------
# embedding blob
# ---------------------------------------------------------------------------

def write_embeddings(path, emb: np.ndarray):
    emb = np.asarray(emb)
    if emb.ndim != 2:
        raise InvalidInputError(f"embeddings must be 2-D, got shape {emb.shape}", "datastore")
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<III", EMB_VERSION, emb.shape[0], emb.shape[1]))
        fh.write(np.ascontiguousarray(emb, dtype="<f4").tobytes())


def read_embeddings(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read embeddings {path}: {exc.strerror}", "datastore") from exc
    if len(raw) < 16 or raw[:4] != EMB_MAGIC:
        raise DataError(f"{path}: not an embedding file (bad magic)", "datastore")
    version, count, dim = struct.unpack_from("<III", raw, 4)
    if version != EMB_VERSION:
        raise DataError(f"{path}: unsupported embedding version {version}", "datastore")
    if len(raw) - 16 != count * dim * 4:
        raise DataError(
            f"{path}: header says {count}x{dim} floats but payload has {(len(raw) - 16) // 4}",
            "datastore",
        )
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(count, dim).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleRecord:
    id: str
    backbone_vec: np.ndarray
    lat: float
    lon: float
    unix_ts: int
    source_id: str


@dataclass
class Dataset:
    """In-memory dataset; arrays are row-aligned."""

    ids: list
    latlon: np.ndarray
    unix_ts: np.ndarray
    source_ids: list
    backbone: np.ndarray
    split: np.ndarray | None = None
    filtered: np.ndarray | None = None
    backbone_name: str = "unknown"

    def __post_init__(self):
        n = len(self.ids)
        for name in ("latlon", "unix_ts", "backbone"):
            if len(getattr(self, name)) != n:
                raise DataError(f"{name} has {len(getattr(self, name))} rows, expected {n}", "datastore")
        if len(self.source_ids) != n:
            raise DataError("source_ids length mismatch", "datastore")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.backbone.shape[1])

    def record(self, i: int) -> SampleRecord:
        return SampleRecord(
            self.ids[i], self.backbone[i], float(self.latlon[i, 0]), float(self.latlon[i, 1]),
            int(self.unix_ts[i]), self.source_ids[i],
        )

    def times(self, scale: str = "monthly") -> np.ndarray:
        return unix2cyclic_array(self.unix_ts, scale)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            [self.ids[i] for i in idx],
            self.latlon[idx],
            self.unix_ts[idx],
            [self.source_ids[i] for i in idx],
            self.backbone[idx],
            None if self.split is None else self.split[idx],
            None if self.filtered is None else self.filtered[idx],
            self.backbone_name,
        )

    def part(self, name: str) -> "Dataset":
        """Rows assigned to split ``name``; the whole set when no split exists."""
        if self.split is None:
            return self
        return self.subset(np.flatnonzero(self.split == name))

    def with_split(self, split: np.ndarray) -> "Dataset":
        return replace(self, split=np.asarray(split, dtype=object))


def write_dataset(ds: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    columns = list(CSV_COLUMNS)
    if ds.split is not None:
        columns.append("split")
    if ds.filtered is not None:
        columns.append("filtered")
    with open(d / "samples.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for i in range(len(ds)):
            row = [ds.ids[i], repr(float(ds.latlon[i, 0])), repr(float(ds.latlon[i, 1])),
                   str(int(ds.unix_ts[i])), ds.source_ids[i]]
            if ds.split is not None:
                row.append(ds.split[i])
            if ds.filtered is not None:
                row.append("1" if ds.filtered[i] else "0")
            w.writerow(row)
    write_embeddings(d / "embeddings.bin", ds.backbone)
    manifest = {
        "format": "gtloc-dataset",
        "version": 1,
        "backbone": ds.backbone_name,
        "dim": ds.dim,
        "count": len(ds),
        "metadata": "samples.csv",
        "embeddings": "embeddings.bin",
    }
    (d / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return d


def load_dataset(path) -> Dataset:
    """Load and validate a dataset directory (or its ``manifest.json``)."""
    p = Path(path)
    mpath = p / MANIFEST_NAME if p.is_dir() else p
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read manifest {mpath}: {exc.strerror}", "datastore") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{mpath}: malformed manifest ({exc.msg})", "datastore") from exc
    if manifest.get("format") != "gtloc-dataset" or manifest.get("version") != 1:
        raise DataError(f"{mpath}: unsupported manifest format/version", "datastore")
    root = mpath.parent

    ids, latlon, ts, sources, split, filtered = [], [], [], [], [], []
    try:
        with open(root / manifest["metadata"], newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [c for c in CSV_COLUMNS if c not in header]
            if missing:
                raise DataError(f"samples CSV lacks columns {missing}", "datastore")
            has_split = "split" in header
            has_filtered = "filtered" in header
            for lineno, row in enumerate(reader, start=2):
                try:
                    lat, lon, t = float(row["lat"]), float(row["lon"]), int(row["unix_ts"])
                except (TypeError, ValueError) as exc:
                    raise DataError(f"samples CSV line {lineno}: {exc}", "datastore") from exc
                if not (-90 <= lat <= 90 and -180 <= lon <= 180):
                    raise DataError(f"samples CSV line {lineno}: coordinate out of range", "datastore")
                if t < 0:
                    raise DataError(f"samples CSV line {lineno}: negative unix_ts", "datastore")
                ids.append(row["id"])
                latlon.append((lat, lon))
                ts.append(t)
                sources.append(row["source_id"])
                if has_split:
                    split.append(row["split"])
                if has_filtered:
                    filtered.append(row["filtered"] in ("1", "true", "True"))
    except OSError as exc:
        raise DataError(f"cannot read samples CSV: {exc.strerror}", "datastore") from exc
    except csv.Error as exc:
        raise DataError(f"malformed samples CSV: {exc}", "datastore") from exc

    if not ids:
        raise DataError("zero samples", "datastore")
    if len(set(ids)) != len(ids):
        seen = set()
        dup = next(i for i in ids if i in seen or seen.add(i))
        raise DataError(f"duplicate sample id {dup!r}", "datastore")
    emb = read_embeddings(root / manifest["embeddings"])
    if emb.shape[0] != len(ids):
        raise DataError(
            f"{len(ids)} metadata rows but {emb.shape[0]} embeddings", "datastore"
        )
    if "dim" in manifest and emb.shape[1] != manifest["dim"]:
        raise DataError(
            f"manifest dim {manifest['dim']} != embedding dim {emb.shape[1]}", "datastore"
        )
    return Dataset(
        ids,
        np.asarray(latlon, dtype=np.float64),
        np.asarray(ts, dtype=np.int64),
        sources,
        emb,
        np.asarray(split, dtype=object) if split else None,
        np.asarray(filtered, dtype=bool) if filtered else None,
        manifest.get("backbone", "unknown"),
    )


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def label_features(latlon: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Smooth label features that the synthetic backbone is built from."""
    lat = np.radians(latlon[:, 0])
    lon = np.radians(latlon[:, 1])
    ee = equal_earth_array(latlon)
    a = 2 * math.pi * times[:, 0]
    b = 2 * math.pi * times[:, 1]
    return np.stack([
        np.cos(a), np.sin(a), np.cos(b), np.sin(b),
        ee[:, 0], ee[:, 1],
        np.sin(lat), np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon),
    ], axis=1)


def synth_generate(
    n: int,
    seed: int = 0,
    dim: int = 768,
    n_sources: int | None = None,
    noise_std: float = 0.0,
    time_dist: str = "uniform",
    wrap_spread: float = 0.04,
) -> Dataset:
    """Synthetic dataset with a known label-to-backbone map.

    Sources (think fixed cameras) sit at points drawn uniformly on the
    sphere; every sample takes its source's location and a capture time in
    2015. ``time_dist='uniform'`` spreads times over the whole year and day;
    ``'wrap'`` clusters both around the wrap point (New Year, midnight) with
    wrapped-normal spread ``wrap_spread`` in torus units.

    The backbone vector is a fixed random linear map of
    :func:`label_features` plus optional Gaussian noise, so at zero noise it
    is an injective function of the labels.
    """
    if n < 1:
        raise InvalidInputError("n must be at least 1", "datastore")
    if time_dist not in ("uniform", "wrap"):
        raise InvalidInputError(f"unknown time distribution {time_dist!r}", "datastore")
    rng = np.random.default_rng(seed)
    n_sources = max(1, n // 20) if n_sources is None else n_sources
    site_lat = np.degrees(np.arcsin(rng.uniform(-1.0, 1.0, n_sources)))
    site_lon = rng.uniform(-180.0, 180.0, n_sources)
    src = rng.integers(0, n_sources, n)
    latlon = np.stack([site_lat[src], site_lon[src]], axis=1)

    if time_dist == "uniform":
        offs = rng.integers(0, 365 * 86400, n)
    else:
        doy = np.round(rng.normal(0.0, wrap_spread * 365, n)).astype(np.int64) % 365
        sod = np.round(rng.normal(0.0, wrap_spread * 86400, n)).astype(np.int64) % 86400
        offs = doy * 86400 + sod
    unix_ts = SYNTH_YEAR_START + offs.astype(np.int64)

    feats = label_features(latlon, unix2cyclic_array(unix_ts))
    mixing = rng.standard_normal((feats.shape[1], dim)) / math.sqrt(feats.shape[1])
    backbone = feats @ mixing
    if noise_std > 0:
        backbone = backbone + noise_std * rng.standard_normal(backbone.shape)
    return Dataset(
        [f"s{i:06d}" for i in range(n)],
        latlon,
        unix_ts,
        [f"src{k:04d}" for k in src],
        backbone.astype(np.float32),
        backbone_name=f"synthetic-{dim}",
    )


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class NoiseSpec:
    gps_batch_std_m: float = 150.0
    gps_queue_std_m: float = 1500.0
    time_month_std: float = 0.15
    time_hour_std: float = 0.15
    label_noise_sigma: float = 0.0
    image_std: float = 0.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise InvalidInputError(f"noise {k} must be non-negative", "datastore")


@dataclass
class Batch:
    latlon: np.ndarray
    times: np.ndarray
    backbone: np.ndarray


def jitter_gps(latlon: np.ndarray, std_m: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian displacement in meters, converted to degrees at each latitude."""
    latlon = np.asarray(latlon, dtype=np.float64)
    if std_m <= 0:
        return latlon.copy()
    dn = rng.normal(0.0, std_m, len(latlon)) / 1000.0
    de = rng.normal(0.0, std_m, len(latlon)) / 1000.0
    lat = latlon[:, 0] + dn / KM_PER_DEGREE
    coslat = np.maximum(np.cos(np.radians(latlon[:, 0])), 1e-6)
    lon = latlon[:, 1] + de / (KM_PER_DEGREE * coslat)
    lat = np.clip(lat, -90.0, 90.0)
    lon = (lon + 180.0) % 360.0 - 180.0
    return np.stack([lat, lon], axis=1)


def jitter_times(times: np.ndarray, month_std: float, hour_std: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian jitter in months/hours, wrapped back onto the unit torus."""
    times = np.asarray(times, dtype=np.float64)
    if month_std <= 0 and hour_std <= 0:
        return times.copy()
    shift = np.stack([
        rng.normal(0.0, 1.0, len(times)) * month_std / 12.0,
        rng.normal(0.0, 1.0, len(times)) * hour_std / 24.0,
    ], axis=1)
    return wrap_unit_array(times + shift)


def apply_label_noise(times: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Perturb time labels once with std ``sigma`` months and ``sigma`` hours."""
    return jitter_times(times, sigma, sigma, rng)


def augment_batch(batch: Batch, noise: NoiseSpec, rng: np.random.Generator) -> Batch:
    latlon = jitter_gps(batch.latlon, noise.gps_batch_std_m, rng)
    times = jitter_times(batch.times, noise.time_month_std, noise.time_hour_std, rng)
    backbone = batch.backbone
    if noise.image_std > 0:
        backbone = backbone + noise.image_std * rng.standard_normal(backbone.shape).astype(backbone.dtype)
    return Batch(latlon, times, backbone)


# ---------------------------------------------------------------------------
# splits and subsampling
# ---------------------------------------------------------------------------

def make_splits(ds: Dataset, mode: str = "random", fractions=(0.75, 0.25), seed: int = 0) -> np.ndarray:
    """Assign each row to ``'train'``, ``'eval'`` or ``''`` (unused).

    ``cross_source`` assigns whole sources, so train and eval never share one.
    """
    f_train, f_eval = (float(f) for f in fractions)
    if f_train < 0 or f_eval < 0 or f_train + f_eval > 1.0 + 1e-12:
        raise InvalidInputError(f"split fractions {fractions} must be non-negative and sum to <= 1", "datastore")
    rng = np.random.default_rng(seed)
    n = len(ds)
    out = np.full(n, "", dtype=object)
    if mode == "random":
        perm = rng.permutation(n)
        n_train = int(round(f_train * n))
        n_eval = min(int(round(f_eval * n)), n - n_train)
        out[perm[:n_train]] = "train"
        out[perm[n_train:n_train + n_eval]] = "eval"
        return out
    if mode == "cross_source":
        sources = sorted(set(ds.source_ids))
        if len(sources) < 2:
            raise InvalidInputError("cross_source split needs at least two sources", "datastore")
        order = [sources[i] for i in rng.permutation(len(sources))]
        k = len(order)
        n_train = int(round(f_train * k))
        n_eval = int(round(f_eval * k))
        if f_train > 0 and f_eval > 0:
            n_train = min(max(n_train, 1), k - 1)
            n_eval = min(max(n_eval, 1), k - n_train)
        side = {s: "train" for s in order[:n_train]}
        side.update({s: "eval" for s in order[n_train:n_train + n_eval]})
        for i, s in enumerate(ds.source_ids):
            out[i] = side.get(s, "")
        return out
    raise InvalidInputError(f"unknown split mode {mode!r}", "datastore")


def subsample(ds: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Uniform subsample without replacement, keeping the original row order."""
    if not 0.0 < fraction <= 1.0:
        raise InvalidInputError(f"fraction {fraction} outside (0, 1]", "datastore")
    if fraction == 1.0:
        return ds
    k = max(1, int(round(fraction * len(ds))))
    idx = np.sort(np.random.default_rng(seed).choice(len(ds), size=k, replace=False))
    return ds.subset(idx)
