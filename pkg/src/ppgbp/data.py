"""Records, BP segmentation schemes, balancing, splits and the sample store."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .errors import ConfigurationError, FormatError, RejectionError

BP_MIN = 80.0
BP_MAX = 180.0

SCHEME_EDGES = {
    "hph": (80.0, 100.0, 140.0, 180.0),
    "even4": (80.0, 105.0, 130.0, 155.0, 180.0),
    "dgk": (80.0, 100.0, 120.0, 130.0, 140.0, 160.0, 180.0),
    "even10": tuple(float(v) for v in range(80, 181, 10)),
}
SCHEME_NAMES = tuple(SCHEME_EDGES)

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.70, 0.225, 0.075)


# ---------------------------------------------------------------------------
# Records and ingest format
# ---------------------------------------------------------------------------


@dataclass
class SubjectRecord:
    subject_id: int
    fs: float
    ppg: np.ndarray
    abp: np.ndarray

    def __post_init__(self):
        self.ppg = np.asarray(self.ppg, dtype=np.float32)
        self.abp = np.asarray(self.abp, dtype=np.float32)
        if self.ppg.shape != self.abp.shape or self.ppg.ndim != 1:
            raise RejectionError(
                f"subject {self.subject_id}: ppg and abp must be 1D of equal length, "
                f"got {self.ppg.shape} and {self.abp.shape}"
            )
        if not self.fs > 0:
            raise ConfigurationError(f"subject {self.subject_id}: fs must be positive")

    def __len__(self):
        return self.ppg.shape[0]


_RECORD_HEADER = struct.Struct("<4sHIfQ")
RECORD_MAGIC = b"PPGR"


def write_record(record: SubjectRecord, path):
    with open(path, "wb") as fh:
        fh.write(_RECORD_HEADER.pack(RECORD_MAGIC, 1, record.subject_id, record.fs, len(record)))
        fh.write(record.ppg.astype("<f4").tobytes())
        fh.write(record.abp.astype("<f4").tobytes())


def read_record(path) -> SubjectRecord:
    raw = Path(path).read_bytes()
    if len(raw) < _RECORD_HEADER.size:
        raise FormatError(f"{path}: truncated record header", len(raw))
    magic, version, sid, fs, n = _RECORD_HEADER.unpack_from(raw)
    if magic != RECORD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    if version != 1:
        raise FormatError(f"{path}: unsupported record version {version}", 4)
    need = _RECORD_HEADER.size + 8 * n
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes for n={n}, found {len(raw)}", len(raw))
    body = np.frombuffer(raw, dtype="<f4", offset=_RECORD_HEADER.size)
    return SubjectRecord(int(sid), float(fs), body[:n].copy(), body[n:].copy())


# ---------------------------------------------------------------------------
# Segmentation schemes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SegmentationScheme:
    name: str
    edges: tuple

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        object.__setattr__(self, "edges", edges)
        if len(edges) < 3:
            raise ConfigurationError(f"scheme {self.name!r} needs at least 2 bins")
        if edges[0] != BP_MIN or edges[-1] != BP_MAX:
            raise ConfigurationError(f"scheme {self.name!r} must span [{BP_MIN}, {BP_MAX}]")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ConfigurationError(f"scheme {self.name!r} edges must be strictly increasing")

    @property
    def n_bins(self):
        return len(self.edges) - 1

    def interval(self, i):
        return self.edges[i], self.edges[i + 1]

    def to_dict(self):
        return {"name": self.name, "edges": list(self.edges)}


def make_scheme(name, edges=None) -> SegmentationScheme:
    if edges is not None:
        return SegmentationScheme(name, tuple(edges))
    try:
        return SegmentationScheme(name, SCHEME_EDGES[name])
    except KeyError:
        raise ConfigurationError(
            f"unknown segmentation scheme {name!r}; expected one of {', '.join(SCHEME_NAMES)}"
        ) from None


def assign_bin(sbp, scheme: SegmentationScheme):
    """Bin index for SBP value(s); values outside [80, 180] clamp to the end bins."""
    edges = np.asarray(scheme.edges)
    idx = np.searchsorted(edges, np.asarray(sbp, dtype=np.float64), side="right") - 1
    idx = np.clip(idx, 0, scheme.n_bins - 1)
    if np.ndim(idx) == 0:
        return int(idx)
    return idx.astype(np.int64)


# ---------------------------------------------------------------------------
# Window samples
# ---------------------------------------------------------------------------


@dataclass
class WindowSample:
    subject_id: int
    window_index: int
    ppg: np.ndarray
    sbp: float
    hr: float
    snr: float


@dataclass
class SampleSet:
    """Columnar collection of window samples (one row per window)."""

    subject_id: np.ndarray
    window_index: np.ndarray
    sbp: np.ndarray
    hr: np.ndarray
    snr: np.ndarray
    ppg: np.ndarray

    def __post_init__(self):
        self.subject_id = np.asarray(self.subject_id, dtype=np.uint32).reshape(-1)
        self.window_index = np.asarray(self.window_index, dtype=np.uint32).reshape(-1)
        self.sbp = np.asarray(self.sbp, dtype=np.float32).reshape(-1)
        self.hr = np.asarray(self.hr, dtype=np.float32).reshape(-1)
        self.snr = np.asarray(self.snr, dtype=np.float32).reshape(-1)
        self.ppg = np.asarray(self.ppg, dtype=np.float32)
        n = self.subject_id.shape[0]
        if self.ppg.ndim != 2:
            self.ppg = self.ppg.reshape(n, -1)
        lengths = {n, self.window_index.shape[0], self.sbp.shape[0], self.hr.shape[0],
                   self.snr.shape[0], self.ppg.shape[0]}
        if len(lengths) != 1:
            raise RejectionError("sample columns have inconsistent lengths")

    @classmethod
    def empty(cls, n_samp=625):
        z = np.zeros(0)
        return cls(z, z, z, z, z, np.zeros((0, n_samp), dtype=np.float32))

    @classmethod
    def from_samples(cls, samples, n_samp=625):
        samples = list(samples)
        if not samples:
            return cls.empty(n_samp)
        return cls(
            [s.subject_id for s in samples],
            [s.window_index for s in samples],
            [s.sbp for s in samples],
            [s.hr for s in samples],
            [s.snr for s in samples],
            np.stack([np.asarray(s.ppg, dtype=np.float32) for s in samples]),
        )

    @classmethod
    def concatenate(cls, parts, n_samp=625):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty(n_samp)
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in cls._fields()))

    @staticmethod
    def _fields():
        return ("subject_id", "window_index", "sbp", "hr", "snr", "ppg")

    @property
    def n_samp(self):
        return self.ppg.shape[1]

    def __len__(self):
        return self.subject_id.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return WindowSample(int(self.subject_id[idx]), int(self.window_index[idx]),
                                self.ppg[idx], float(self.sbp[idx]), float(self.hr[idx]),
                                float(self.snr[idx]))
        return self.take(idx)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def take(self, idx):
        return SampleSet(*(getattr(self, f)[idx] for f in self._fields()))

    def for_subjects(self, ids):
        return self.take(np.flatnonzero(np.isin(self.subject_id, np.asarray(list(ids)))))

    def subjects(self):
        return [int(s) for s in np.unique(self.subject_id)]

    def equals(self, other):
        return all(
            np.array_equal(getattr(self, f).view(np.uint8), getattr(other, f).view(np.uint8))
            and getattr(self, f).shape == getattr(other, f).shape
            for f in self._fields()
        )


# ---------------------------------------------------------------------------
# Preprocessing of a record into labelled windows
# ---------------------------------------------------------------------------


@dataclass
class PreprocessConfig:
    filter: dsp.FilterSpec = field(default_factory=dsp.FilterSpec)
    thresholds: dsp.QualityThresholds = field(default_factory=dsp.QualityThresholds)
    window_s: float = dsp.WINDOW_S
    overlap_s: float = dsp.OVERLAP_S


def preprocess_record(record: SubjectRecord, config: PreprocessConfig | None = None):
    """Filter, window, label and gate one record.

    Returns ``(samples, reasons)`` where ``reasons`` counts verdicts by name.
    """
    config = config or PreprocessConfig()
    fspec = config.filter
    if fspec.fs != record.fs:
        fspec = dsp.FilterSpec(fspec.order, fspec.f_low, fspec.f_high, record.fs)
    coeffs = dsp.design_bandpass(fspec)
    raw = record.ppg.astype(np.float64)
    ppg = dsp.apply_filter(raw, coeffs)
    abp = record.abp.astype(np.float64)
    n, offsets = dsp.window_offsets(len(record), record.fs, config.window_s, config.overlap_s)
    reasons = {r.value: 0 for r in dsp.Reason}
    rows = []
    for k, off in enumerate(offsets):
        a = dsp.assess_window(ppg[off : off + n], abp[off : off + n], record.fs,
                              config.thresholds, raw[off : off + n])
        reasons[a.verdict.reason.value] += 1
        if a.verdict.accepted:
            rows.append(WindowSample(record.subject_id, k, a.ppg, a.sbp, a.hr, a.snr))
    return SampleSet.from_samples(rows, n), reasons


# ---------------------------------------------------------------------------
# Eligibility, balancing and splits
# ---------------------------------------------------------------------------


def bin_counts(samples: SampleSet, scheme: SegmentationScheme):
    """Per-subject valid-window counts per bin: ``{subject_id: np.ndarray[n_bins]}``."""
    bins = assign_bin(samples.sbp, scheme) if len(samples) else np.zeros(0, dtype=np.int64)
    out = {}
    for sid in samples.subjects():
        mask = samples.subject_id == sid
        out[sid] = np.bincount(bins[mask], minlength=scheme.n_bins)
    return out


def eligible_subjects(counts, scheme: SegmentationScheme, min_windows=0, per_bin_quota=1000):
    """Subjects with enough windows overall and at least ``per_bin_quota`` in every bin."""
    out = []
    for sid in sorted(counts):
        c = np.asarray(counts[sid])
        if c.shape[0] != scheme.n_bins:
            raise ConfigurationError(
                f"subject {sid}: {c.shape[0]} bin counts for a {scheme.n_bins}-bin scheme"
            )
        if c.sum() >= min_windows and np.all(c >= per_bin_quota):
            out.append(int(sid))
    return out


def balance(samples: SampleSet, scheme: SegmentationScheme, subject_ids, per_bin_quota, seed):
    """Draw exactly ``per_bin_quota`` windows per (subject, bin) without replacement."""
    rng = np.random.default_rng(seed)
    bins = assign_bin(samples.sbp, scheme) if len(samples) else np.zeros(0, dtype=np.int64)
    chosen = []
    for sid in sorted(int(s) for s in subject_ids):
        for b in range(scheme.n_bins):
            pool = np.flatnonzero((samples.subject_id == sid) & (bins == b))
            if pool.shape[0] < per_bin_quota:
                raise RuntimeError(
                    f"subject {sid} bin {b}: {pool.shape[0]} windows < quota {per_bin_quota}"
                )
            pick = rng.choice(pool.shape[0], size=per_bin_quota, replace=False)
            chosen.append(pool[np.sort(pick)])
    idx = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
    return samples.take(idx)


def split_subjects(subject_ids, fractions=DEFAULT_FRACTIONS, seed=0):
    """Seeded subject-level partition into train/val/test."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ConfigurationError(f"three split fractions required, got {len(fractions)}")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must be non-negative and sum to 1: {fractions}")
    ids = sorted(int(s) for s in subject_ids)
    if len(ids) < 3:
        raise ConfigurationError(f"need at least 3 subjects to split, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = round(fractions[0] * len(ids))
    n_val = min(round(fractions[1] * len(ids)), len(ids) - n_train)
    return {
        "train": shuffled[:n_train],
        "val": shuffled[n_train : n_train + n_val],
        "test": shuffled[n_train + n_val :],
    }


@dataclass
class PersonalizationSplit:
    finetune: np.ndarray
    val: np.ndarray
    test: np.ndarray


def personalization_split(samples: SampleSet, take_every=10) -> PersonalizationSplit:
    """Index sets into ``samples``: every ``take_every``-th SBP-sorted window fine-tunes.

    The remainder alternates between validation and test so both halves
    span the subject's SBP range.
    """
    n = len(samples)
    if take_every < 1:
        raise ConfigurationError("take_every must be >= 1")
    if n - math.ceil(n / take_every) < 2:
        raise RejectionError(
            f"subject has {n} samples; too few for non-empty finetune/val/test sets"
        )
    order = np.lexsort((samples.window_index, samples.sbp))
    pos = np.arange(n)
    finetune = order[pos % take_every == 0]
    rest = order[pos % take_every != 0]
    return PersonalizationSplit(finetune, rest[0::2], rest[1::2])


# ---------------------------------------------------------------------------
# Balanced dataset and on-disk store
# ---------------------------------------------------------------------------


@dataclass
class BalancedDataset:
    scheme: SegmentationScheme
    per_bin_quota: int
    samples: SampleSet
    split_assignment: dict
    seed: int = 0

    def split(self, name):
        ids = [sid for sid, s in self.split_assignment.items() if s == name]
        return self.samples.for_subjects(ids)

    def subjects_in(self, name):
        return sorted(sid for sid, s in self.split_assignment.items() if s == name)

    def manifest(self):
        return {
            "scheme": self.scheme.name,
            "edges": list(self.scheme.edges),
            "quota": self.per_bin_quota,
            "seed": self.seed,
            "n_records": len(self.samples),
            "split": {str(k): v for k, v in sorted(self.split_assignment.items())},
        }


def build_dataset(samples: SampleSet, scheme, per_bin_quota=1000, min_windows=0,
                  fractions=DEFAULT_FRACTIONS, seed=0) -> BalancedDataset:
    counts = bin_counts(samples, scheme)
    ids = eligible_subjects(counts, scheme, min_windows, per_bin_quota)
    if len(ids) < 3:
        raise ConfigurationError(
            f"only {len(ids)} subjects eligible for scheme {scheme.name} at quota {per_bin_quota}"
        )
    balanced = balance(samples, scheme, ids, per_bin_quota, seed)
    parts = split_subjects(ids, fractions, seed)
    assignment = {sid: name for name in SPLITS for sid in parts[name]}
    return BalancedDataset(scheme, per_bin_quota, balanced, assignment, seed)


_STORE_HEADER = struct.Struct("<4sHIQ")
STORE_HEADER_SIZE = 32
STORE_MAGIC = b"PPGW"


def _record_dtype(n_samp):
    return np.dtype([("subject_id", "<u4"), ("window_index", "<u4"), ("sbp", "<f4"),
                     ("hr", "<f4"), ("snr", "<f4"), ("ppg", "<f4", (n_samp,))])


def write_store(samples, path, n_samp=None):
    if not isinstance(samples, SampleSet):
        samples = SampleSet.from_samples(samples, n_samp or 625)
    n_samp = samples.n_samp
    rec = np.empty(len(samples), dtype=_record_dtype(n_samp))
    for f in SampleSet._fields():
        rec[f] = getattr(samples, f)
    header = _STORE_HEADER.pack(STORE_MAGIC, 1, n_samp, len(samples))
    with open(path, "wb") as fh:
        fh.write(header.ljust(STORE_HEADER_SIZE, b"\0"))
        fh.write(rec.tobytes())


def read_store(path) -> SampleSet:
    raw = Path(path).read_bytes()
    if len(raw) < STORE_HEADER_SIZE:
        raise FormatError(f"{path}: truncated store header", len(raw))
    magic, version, n_samp, n_rec = _STORE_HEADER.unpack_from(raw)
    if magic != STORE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    if version != 1:
        raise FormatError(f"{path}: unsupported store version {version}", 4)
    dt = _record_dtype(n_samp)
    need = STORE_HEADER_SIZE + n_rec * dt.itemsize
    if len(raw) < need:
        complete = (len(raw) - STORE_HEADER_SIZE) // dt.itemsize
        raise FormatError(
            f"{path}: truncated after {complete} of {n_rec} records",
            STORE_HEADER_SIZE + complete * dt.itemsize,
        )
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes", need)
    rec = np.frombuffer(raw, dtype=dt, count=n_rec, offset=STORE_HEADER_SIZE)
    return SampleSet(*(rec[f].copy() for f in SampleSet._fields()))


def manifest_path(store_path):
    p = Path(store_path)
    return p.with_name(p.name + ".json")


def save_dataset(ds: BalancedDataset, path):
    write_store(ds.samples, path)
    manifest_path(path).write_text(json.dumps(ds.manifest(), indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> BalancedDataset:
    mpath = manifest_path(path)
    try:
        meta = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise FormatError(f"{path}: missing dataset manifest {mpath.name}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: invalid manifest ({exc})", exc.pos) from None
    samples = read_store(path)
    scheme = make_scheme(meta["scheme"], meta["edges"])
    assignment = {int(k): v for k, v in meta["split"].items()}
    return BalancedDataset(scheme, int(meta["quota"]), samples, assignment, int(meta["seed"]))
