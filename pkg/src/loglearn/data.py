"""Well-log ingestion, interval sampling, pairing and augmentation."""

from __future__ import annotations

import io
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

CHANNELS = ("DRHO", "DENS", "GR", "DTC")
DEFAULT_LENGTH = 100

DEFAULT_SCHEMA = {
    "well_id": "well_id",
    "depth": "depth",
    "DRHO": "DRHO",
    "DENS": "DENS",
    "GR": "GR",
    "DTC": "DTC",
    "formation": "formation",
    "class_label": "class",
    "rock_type": "rock_type",
    "latitude": "latitude",
    "longitude": "longitude",
}
REQUIRED = ("well_id", "depth") + CHANNELS


class DataError(ValueError):
    """Malformed or insufficient input data."""


@dataclass
class WellRecord:
    well_id: str
    depth: np.ndarray
    channels: np.ndarray  # (n, 4) in CHANNELS order
    formation: str = ""
    class_label: str | None = None
    rock_type: np.ndarray | None = None
    latitude: float | None = None
    longitude: float | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        self.channels = np.asarray(self.channels, dtype=float)
        if self.channels.ndim != 2 or self.channels.shape[1] != len(CHANNELS):
            raise DataError(f"{self.well_id}: channels must be (n, {len(CHANNELS)})")
        if len(self.depth) != len(self.channels):
            raise DataError(f"{self.well_id}: depth and channel lengths differ")
        if len(self.depth) > 1 and np.any(np.diff(self.depth) <= 0):
            raise DataError(f"{self.well_id}: depth must be strictly increasing")

    def __len__(self) -> int:
        return len(self.depth)

    @property
    def has_coordinates(self) -> bool:
        return self.latitude is not None and self.longitude is not None

    def valid_starts(self, length: int) -> np.ndarray:
        """Offsets of windows of ``length`` consecutive unit-spaced measurements."""
        n = len(self.depth)
        if n < length:
            return np.zeros(0, dtype=np.int64)
        starts = np.arange(n - length + 1)
        if length == 1:
            return starts
        span = self.depth[starts + length - 1] - self.depth[starts]
        step = _spacing(self.depth)
        return starts[np.isclose(span, (length - 1) * step)]

    def window(self, start: int, length: int) -> np.ndarray:
        return self.channels[start : start + length]

    def offset_of(self, start_depth: float) -> int:
        idx = int(np.searchsorted(self.depth, start_depth))
        if idx >= len(self.depth) or not np.isclose(self.depth[idx], start_depth):
            raise KeyError(f"{self.well_id}: no measurement at depth {start_depth}")
        return idx


def _spacing(depth: np.ndarray) -> float:
    if len(depth) < 2:
        return 1.0
    return float(np.median(np.diff(depth)))


@dataclass
class IntervalSample:
    well_id: str
    start_depth: float
    values: np.ndarray  # (l, 4)

    @property
    def length(self) -> int:
        return self.values.shape[0]


@dataclass
class IntervalPair:
    a: IntervalSample
    b: IntervalSample
    label: int


@dataclass
class IntervalTriplet:
    anchor: IntervalSample
    positive: IntervalSample
    negative: IntervalSample


@dataclass(frozen=True)
class PairingRule:
    """``well_linking``: same well is similar. ``close_well_linking``: same
    well and start depths at most ``close_param`` feet apart."""

    mode: str = "well_linking"
    close_param: float | None = None

    def validate(self, length: int) -> None:
        if self.mode == "well_linking":
            return
        if self.mode != "close_well_linking":
            raise ValueError(f"unknown pairing mode {self.mode!r}")
        if self.close_param is None:
            raise ValueError("close_well_linking requires close_param")
        if self.close_param <= length:
            raise ValueError(f"close_param ({self.close_param}) must exceed the interval length {length}")

    def label(self, well_a: str, well_b: str, start_a: float, start_b: float) -> int:
        if well_a != well_b:
            return 0
        if self.mode == "well_linking":
            return 1
        return int(abs(start_a - start_b) <= self.close_param)

    def labels(self, well_a, well_b, start_a, start_b) -> np.ndarray:
        same = np.asarray(well_a) == np.asarray(well_b)
        if self.mode == "well_linking":
            return same.astype(np.int64)
        near = np.abs(np.asarray(start_a, float) - np.asarray(start_b, float)) <= self.close_param
        return (same & near).astype(np.int64)


# -- loading ---------------------------------------------------------------------


def load_wells(source, schema: dict | None = None) -> list[WellRecord]:
    """Read a delimited table (comma or tab, auto-detected) into wells.

    ``schema`` maps logical names (see ``DEFAULT_SCHEMA``) to column headers.
    Rows missing any core channel are dropped; wells left empty are skipped
    with a warning.
    """
    cols = dict(DEFAULT_SCHEMA)
    cols.update(schema or {})
    if isinstance(source, (str, Path)):
        text = Path(source).read_text()
    elif hasattr(source, "read"):
        text = source.read()
    else:
        raise TypeError("source must be a path or text stream")
    header = text.split("\n", 1)[0]
    sep = "\t" if header.count("\t") > header.count(",") else ","
    df = pd.read_csv(io.StringIO(text), sep=sep, dtype={cols["well_id"]: str}, float_precision="round_trip")
    for key in REQUIRED:
        if cols[key] not in df.columns:
            raise DataError(f"missing required column {cols[key]!r} ({key})")
    all_ids = set(df[cols["well_id"]].astype(str))
    core = [cols[c] for c in CHANNELS] + [cols["depth"]]
    for c in core:
        df[c] = pd.to_numeric(df[c], errors="coerce")
    df = df.dropna(subset=core)

    def optional(key):
        return cols[key] if cols[key] in df.columns else None

    wells: list[WellRecord] = []
    for well_id, group in df.groupby(cols["well_id"], sort=True):
        group = group.sort_values(cols["depth"], kind="mergesort")
        group = group.drop_duplicates(subset=cols["depth"], keep="first")
        record = WellRecord(
            well_id=str(well_id),
            depth=group[cols["depth"]].to_numpy(float),
            channels=group[[cols[c] for c in CHANNELS]].to_numpy(float),
        )
        if optional("formation"):
            record.formation = _first(group[cols["formation"]], "")
        if optional("class_label"):
            record.class_label = _first(group[cols["class_label"]], None)
        if optional("rock_type"):
            record.rock_type = group[cols["rock_type"]].astype(str).to_numpy()
        if optional("latitude") and optional("longitude"):
            lat = pd.to_numeric(group[cols["latitude"]], errors="coerce").dropna()
            lon = pd.to_numeric(group[cols["longitude"]], errors="coerce").dropna()
            if len(lat) and len(lon):
                record.latitude, record.longitude = float(lat.iloc[0]), float(lon.iloc[0])
        wells.append(record)
    for missing in sorted(all_ids - {w.well_id for w in wells}):
        warnings.warn(f"well {missing} is empty after filtering; skipped")
    return wells


def _first(series: pd.Series, default):
    s = series.dropna()
    return str(s.iloc[0]) if len(s) else default


def wells_to_frame(wells: Sequence[WellRecord]) -> pd.DataFrame:
    frames = []
    for w in wells:
        df = pd.DataFrame(w.channels, columns=list(CHANNELS))
        df.insert(0, "depth", w.depth)
        df.insert(0, "well_id", w.well_id)
        df["formation"] = w.formation
        if w.class_label is not None:
            df["class"] = w.class_label
        if w.rock_type is not None:
            df["rock_type"] = w.rock_type
        if w.has_coordinates:
            df["latitude"] = w.latitude
            df["longitude"] = w.longitude
        frames.append(df)
    return pd.concat(frames, ignore_index=True)


# -- standardization -------------------------------------------------------------


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


def standardize(wells: Sequence[WellRecord], stats: ChannelStats | None = None):
    """Per-channel zero mean / unit variance; pass ``stats`` to reuse training statistics."""
    if stats is None:
        stacked = np.concatenate([w.channels for w in wells], axis=0) if wells else np.zeros((0, 4))
        if len(stacked) < 2:
            raise DataError("need at least 2 samples per channel to compute statistics")
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        zero = std <= 1e-12
        if zero.any():
            names = [CHANNELS[i] for i in np.flatnonzero(zero)]
            warnings.warn(f"zero-variance channel(s) {names}: centered only")
            std = np.where(zero, 1.0, std)
        stats = ChannelStats(mean, std)
    out = [
        WellRecord(
            well_id=w.well_id,
            depth=w.depth,
            channels=(w.channels - stats.mean) / stats.std,
            formation=w.formation,
            class_label=w.class_label,
            rock_type=w.rock_type,
            latitude=w.latitude,
            longitude=w.longitude,
        )
        for w in wells
    ]
    return out, stats


# -- sampling --------------------------------------------------------------------


class _Pool:
    """Eligible wells and their valid window offsets for one length."""

    def __init__(self, wells: Sequence[WellRecord], length: int):
        self.length = length
        self.wells = []
        self.starts = []
        for w in wells:
            s = w.valid_starts(length)
            if len(s):
                self.wells.append(w)
                self.starts.append(s)
        if not self.wells:
            raise DataError(f"no well has {length} consecutive measurements")
        self.counts = np.array([len(s) for s in self.starts])
        self.ids = np.array([w.well_id for w in self.wells])

    def sample(self, wi: int, si: int) -> IntervalSample:
        w = self.wells[wi]
        off = int(self.starts[wi][si])
        return IntervalSample(w.well_id, float(w.depth[off]), w.window(off, self.length).copy())

    def start_depth(self, wi: np.ndarray, si: np.ndarray) -> np.ndarray:
        return np.array([self.wells[a].depth[self.starts[a][b]] for a, b in zip(wi, si)])


def sample_windows(wells, length: int, n: int, seed) -> list[IntervalSample]:
    """``n`` windows drawn uniformly: well uniformly, then offset uniformly."""
    if n <= 0:
        return []
    pool = _Pool(wells, length)
    rng = np.random.default_rng(seed)
    wi = rng.integers(len(pool.wells), size=n)
    si = rng.integers(0, pool.counts[wi])
    return [pool.sample(a, b) for a, b in zip(wi, si)]


def sample_pairs(wells, length: int, rule: PairingRule, n: int, seed, max_rounds: int = 400) -> list[IntervalPair]:
    """Draw ``n`` labelled pairs, ``ceil(n/2)`` positives and ``floor(n/2)`` negatives.

    Proposals are mode-independent (half same-well, half independent wells),
    labels come from ``rule`` and proposals are accepted in order while their
    class still has room. Under the same seed, two rules that agree on every
    proposal therefore yield identical datasets.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rule.validate(length)
    pool = _Pool(wells, length)
    if len(pool.wells) < 2 and rule.mode == "well_linking":
        raise DataError("cannot satisfy label class 0: need at least two eligible wells")
    need = {1: (n + 1) // 2, 0: n // 2}
    rng = np.random.default_rng(seed)
    out: list[IntervalPair] = []
    chunk = max(256, 4 * n)
    for _ in range(max_rounds):
        wa = rng.integers(len(pool.wells), size=chunk)
        same = rng.random(chunk) < 0.5
        wb = np.where(same, wa, rng.integers(len(pool.wells), size=chunk))
        sa = rng.integers(0, pool.counts[wa])
        sb = rng.integers(0, pool.counts[wb])
        da, db = pool.start_depth(wa, sa), pool.start_depth(wb, sb)
        labels = rule.labels(pool.ids[wa], pool.ids[wb], da, db)
        for i in range(chunk):
            lab = int(labels[i])
            if need[lab] == 0:
                continue
            need[lab] -= 1
            out.append(IntervalPair(pool.sample(wa[i], sa[i]), pool.sample(wb[i], sb[i]), lab))
            if need[0] == need[1] == 0:
                return out
    missing = [k for k, v in need.items() if v]
    raise DataError(f"cannot satisfy label class {missing[0]} after {max_rounds} proposal rounds")


def sample_triplets(wells, length: int, rule: PairingRule, n: int, seed, max_tries: int = 1000) -> list[IntervalTriplet]:
    """Anchor/positive satisfy the label-1 rule, anchor/negative the label-0 rule."""
    if n <= 0:
        return []
    rule.validate(length)
    pool = _Pool(wells, length)
    if len(pool.wells) < 2 and rule.mode == "well_linking":
        raise DataError("cannot satisfy label class 0: need at least two eligible wells")
    rng = np.random.default_rng(seed)
    out: list[IntervalTriplet] = []
    for _ in range(n):
        wa = int(rng.integers(len(pool.wells)))
        sa = int(rng.integers(pool.counts[wa]))
        depths = pool.wells[wa].depth[pool.starts[wa]]
        da = depths[sa]
        if rule.mode == "close_well_linking":
            lo = int(np.searchsorted(depths, da - rule.close_param, side="left"))
            hi = int(np.searchsorted(depths, da + rule.close_param, side="right"))
        else:
            lo, hi = 0, len(depths)
        sp = int(rng.integers(lo, hi))
        for _ in range(max_tries):
            wn = wa if rng.random() < 0.5 else int(rng.integers(len(pool.wells)))
            sn = int(rng.integers(pool.counts[wn]))
            dn = pool.wells[wn].depth[pool.starts[wn][sn]]
            if rule.label(pool.ids[wa], pool.ids[wn], da, dn) == 0:
                break
        else:
            raise DataError("cannot satisfy label class 0 for a triplet negative")
        out.append(IntervalTriplet(pool.sample(wa, sa), pool.sample(wa, sp), pool.sample(wn, sn)))
    return out


def tile_intervals(wells, length: int, stride: int | None = None) -> list[IntervalSample]:
    """Deterministic intervals over each well, ordered by (well_id, start_depth)."""
    stride = stride or length
    out = []
    for w in sorted(wells, key=lambda w: w.well_id):
        valid = set(w.valid_starts(length).tolist())
        start = 0
        while start + length <= len(w):
            if start in valid:
                out.append(IntervalSample(w.well_id, float(w.depth[start]), w.window(start, length).copy()))
                start += stride
            else:
                start += 1
    return out


def stack_values(samples: Sequence[IntervalSample]) -> np.ndarray:
    if not samples:
        return np.zeros((0, 0, len(CHANNELS)))
    return np.stack([s.values for s in samples])


# -- augmentation ----------------------------------------------------------------


def augment_noise(sample: IntervalSample, sigma: float, seed, channel_std=None) -> IntervalSample:
    """Add ``N(0, sigma * channel_std)`` to every entry (channel_std defaults to 1)."""
    std = np.ones(sample.values.shape[-1]) if channel_std is None else np.asarray(channel_std, float)
    if sigma == 0:
        return IntervalSample(sample.well_id, sample.start_depth, sample.values.copy())
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(sample.values.shape) * (sigma * std)
    return IntervalSample(sample.well_id, sample.start_depth, sample.values + noise)


def augment_mask(sample: IntervalSample, p: float, seed):
    """Zero out whole time steps independently with probability ``p``.

    Returns the masked sample and the boolean per-step mask (True = masked).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("mask probability must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    mask = rng.random(sample.values.shape[0]) < p
    values = sample.values.copy()
    values[mask] = 0.0
    return IntervalSample(sample.well_id, sample.start_depth, values), mask


def augment_batch(x: np.ndarray, rng: np.random.Generator, noise_sigma: float = 0.0,
                  mask_p: float = 0.0) -> tuple[np.ndarray, np.ndarray | None]:
    """Batched noise + masking for training loops; returns (inputs, step mask)."""
    out = x
    if noise_sigma > 0:
        out = out + rng.standard_normal(x.shape) * noise_sigma
    mask = None
    if mask_p > 0:
        mask = rng.random(x.shape[:2]) < mask_p
        out = np.where(mask[..., None], 0.0, out)
    return out, mask


# -- labels ----------------------------------------------------------------------


def geographic_labels(wells: Sequence[WellRecord], k: int, seed=0) -> dict[str, int]:
    """k-means over (latitude, longitude) of each well."""
    from .eval import kmeans

    missing = [w.well_id for w in wells if not w.has_coordinates]
    if missing:
        raise DataError(f"wells without coordinates: {missing}")
    pts = np.array([[w.latitude, w.longitude] for w in wells])
    labels = kmeans(pts, k, seed=seed)
    return {w.well_id: int(l) for w, l in zip(wells, labels)}


def interval_label(sample: IntervalSample, well: WellRecord, target: str, geo: dict | None = None):
    """Expert/derived label of one interval for a given evaluation target."""
    if target == "well":
        return well.well_id
    if target == "formation":
        return well.formation
    if target == "class":
        return well.class_label
    if target == "formation_class":
        return f"{well.formation}|{well.class_label}"
    if target == "geographical":
        if geo is None:
            raise ValueError("geographical target needs a well -> label map")
        return geo[well.well_id]
    if target == "rock_type":
        if well.rock_type is None:
            raise DataError(f"{well.well_id}: no rock_type column")
        off = well.offset_of(sample.start_depth)
        vals, counts = np.unique(well.rock_type[off : off + sample.length], return_counts=True)
        return str(vals[np.argmax(counts)])
    raise ValueError(f"unknown label target {target!r}")


# -- binary dataset cache --------------------------------------------------------

DATASET_MAGIC = b"LLDS"
DATASET_VERSION = 1
_KIND_PAIRS, _KIND_TRIPLETS = 1, 2


def _write_sample(fh: BinaryIO, s: IntervalSample) -> None:
    raw = s.well_id.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<d", s.start_depth))
    fh.write(np.ascontiguousarray(s.values, dtype="<f8").tobytes())


def _read_sample(fh: BinaryIO, length: int, channels: int) -> IntervalSample:
    (nlen,) = struct.unpack("<I", fh.read(4))
    well_id = fh.read(nlen).decode("utf-8")
    (start,) = struct.unpack("<d", fh.read(8))
    values = np.frombuffer(fh.read(8 * length * channels), dtype="<f8").reshape(length, channels).astype(float)
    return IntervalSample(well_id, start, values)


def write_dataset(records: Sequence, fh: BinaryIO) -> None:
    """``LLDS``, u32 version, u32 kind (1 pairs, 2 triplets), u32 l, u32 channels,
    u64 count, then records (samples as name-length/name/start/values; pairs
    add a u8 label)."""
    kind = _KIND_TRIPLETS if records and isinstance(records[0], IntervalTriplet) else _KIND_PAIRS
    first = (records[0].anchor if kind == _KIND_TRIPLETS else records[0].a) if records else None
    length, channels = first.values.shape if first is not None else (0, len(CHANNELS))
    fh.write(DATASET_MAGIC)
    fh.write(struct.pack("<IIIIQ", DATASET_VERSION, kind, length, channels, len(records)))
    for r in records:
        if kind == _KIND_PAIRS:
            _write_sample(fh, r.a)
            _write_sample(fh, r.b)
            fh.write(struct.pack("<B", r.label))
        else:
            for s in (r.anchor, r.positive, r.negative):
                _write_sample(fh, s)


def read_dataset(fh: BinaryIO) -> list:
    if fh.read(4) != DATASET_MAGIC:
        raise DataError("not a dataset cache (bad magic)")
    version, kind, length, channels, count = struct.unpack("<IIIIQ", fh.read(24))
    if version != DATASET_VERSION:
        raise DataError(f"unsupported dataset cache version {version}")
    out = []
    for _ in range(count):
        if kind == _KIND_PAIRS:
            a = _read_sample(fh, length, channels)
            b = _read_sample(fh, length, channels)
            (label,) = struct.unpack("<B", fh.read(1))
            out.append(IntervalPair(a, b, label))
        else:
            out.append(IntervalTriplet(*(_read_sample(fh, length, channels) for _ in range(3))))
    return out


def save_dataset(records, path) -> None:
    buf = io.BytesIO()
    write_dataset(records, buf)
    Path(path).write_bytes(buf.getvalue())


def load_dataset(path) -> list:
    with open(path, "rb") as fh:
        return read_dataset(fh)
