"""Domain types, file formats and subject-wise fold splitting.

Events are detector candidates given as ``[start_ms, end_ms)`` intervals on a
single channel.  Waveforms are stored one file per subject-channel in the
little-endian ``HFOW`` container; the dataset is described by a TOML manifest.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import tomli
import tomli_w

log = logging.getLogger(__name__)

WAVEFORM_MAGIC = b"HFOW"
WAVEFORM_VERSION = 1
_WAVEFORM_HEADER = struct.Struct("<4sIII")

MANIFEST_FORMAT = "hfodistill-manifest"
MANIFEST_VERSION = 1

EVENT_CSV_HEADER = ("subject", "channel", "start_ms", "end_ms", "detector")

# train:val:test subjects per fold for the 185-subject cohort
DEFAULT_SPLIT_RATIO = (119, 30, 36)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class Outcome(str, Enum):
    SEIZURE_FREE = "seizure_free"
    NOT_SEIZURE_FREE = "not_seizure_free"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class Recording:
    subject_id: str
    channel_id: str
    sample_rate: int
    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise DataError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise DataError(f"{self.subject_id}/{self.channel_id}: samples must be a non-empty 1-d array")
        if not np.all(np.isfinite(samples)):
            raise DataError(f"{self.subject_id}/{self.channel_id}: non-finite samples")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def duration_ms(self) -> float:
        return 1000.0 * self.samples.size / self.sample_rate


@dataclass(frozen=True, order=True)
class HfoEvent:
    subject_id: str
    channel_id: str
    start_ms: float
    end_ms: float
    detector_tag: str = field(default="", compare=False)

    def __post_init__(self):
        if not (math.isfinite(self.start_ms) and math.isfinite(self.end_ms)):
            raise DataError(f"non-finite event bounds in {self.key}")
        if self.start_ms < 0:
            raise DataError(f"negative start time in {self.key}")
        if self.start_ms >= self.end_ms:
            raise DataError(f"event start must precede end: {self.key}")

    @property
    def midpoint_ms(self) -> float:
        return (self.start_ms + self.end_ms) / 2.0

    @property
    def duration_ms(self) -> float:
        return self.end_ms - self.start_ms

    @property
    def key(self) -> str:
        """Stable textual identity, independent of list position."""
        return f"{self.subject_id}|{self.channel_id}|{self.start_ms!r}|{self.end_ms!r}"


def stable_hash64(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class Window:
    event: HfoEvent
    samples: np.ndarray = field(repr=False)
    center_ms: float
    sample_rate: int


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    institution: str = ""
    outcome: Outcome = Outcome.UNKNOWN
    resected_channels: frozenset = frozenset()

    @property
    def has_outcome(self) -> bool:
        return self.outcome is not Outcome.UNKNOWN

    @property
    def seizure_free(self) -> bool:
        return self.outcome is Outcome.SEIZURE_FREE


@dataclass(frozen=True)
class DatasetManifest:
    subjects: tuple[SubjectRecord, ...]
    event_index: Mapping[str, Path]
    waveform_index: Mapping[tuple[str, str], Path]
    root: Path = Path(".")
    event_counts: Mapping[str, int] = field(default_factory=dict)

    def subject(self, subject_id: str) -> SubjectRecord:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)

    def channels(self, subject_id: str) -> list[str]:
        return sorted(c for (s, c) in self.waveform_index if s == subject_id)

    @property
    def n_events(self) -> int:
        return sum(self.event_counts.values())

    def load_events(self) -> list[HfoEvent]:
        events: list[HfoEvent] = []
        for s in self.subjects:
            events.extend(load_events(self.event_index[s.subject_id]))
        return sorted(events)

    def load_recording(self, subject_id: str, channel_id: str) -> Recording:
        try:
            path = self.waveform_index[(subject_id, channel_id)]
        except KeyError:
            raise DataError(f"no waveform for {subject_id}/{channel_id}") from None
        return read_waveform(path, subject_id, channel_id)


@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train: frozenset
    val: frozenset
    test: frozenset

    def role(self, subject_id: str) -> str:
        for name in ("train", "val", "test"):
            if subject_id in getattr(self, name):
                return name
        return "unused"


# --------------------------------------------------------------------------
# events CSV

def load_events(path) -> list[HfoEvent]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"event file not found: {path}")
    events = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(h.strip() for h in header) != EVENT_CSV_HEADER:
            raise DataError(f"{path}: expected header {','.join(EVENT_CSV_HEADER)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            subject, channel, start, end, detector = (c.strip() for c in row)
            try:
                start_ms, end_ms = float(start), float(end)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric time field") from None
            try:
                events.append(HfoEvent(subject, channel, start_ms, end_ms, detector))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    events.sort()
    return events


def write_events(path, events: Iterable[HfoEvent]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EVENT_CSV_HEADER)
        for ev in sorted(events):
            writer.writerow([ev.subject_id, ev.channel_id, repr(ev.start_ms), repr(ev.end_ms), ev.detector_tag])


# --------------------------------------------------------------------------
# HFOW waveform container

def write_waveform(path, recording: Recording) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.asarray(recording.samples, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_WAVEFORM_HEADER.pack(WAVEFORM_MAGIC, WAVEFORM_VERSION, int(recording.sample_rate), data.size))
        fh.write(data.tobytes())


def read_waveform_header(path) -> tuple[int, int]:
    """Return ``(sample_rate, sample_count)`` without reading the samples."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read(_WAVEFORM_HEADER.size)
    if len(raw) < _WAVEFORM_HEADER.size:
        raise DataError(f"{path}: truncated waveform header")
    magic, version, fs, count = _WAVEFORM_HEADER.unpack(raw)
    if magic != WAVEFORM_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != WAVEFORM_VERSION:
        raise DataError(f"{path}: unsupported waveform version {version}")
    return fs, count


def read_waveform(path, subject_id: str = "", channel_id: str = "") -> Recording:
    path = Path(path)
    fs, count = read_waveform_header(path)
    with open(path, "rb") as fh:
        fh.seek(_WAVEFORM_HEADER.size)
        payload = fh.read()
    if len(payload) != 4 * count:
        raise DataError(f"{path}: expected {count} samples, found {len(payload) // 4}")
    samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return Recording(subject_id, channel_id, fs, samples)


# --------------------------------------------------------------------------
# manifest

def write_manifest(path, subjects: Sequence[SubjectRecord], event_paths: Mapping[str, str],
                   waveform_paths: Mapping[tuple[str, str], str]) -> None:
    """Write a TOML manifest.  Paths are stored as given (relative to the manifest)."""
    entries = []
    for s in subjects:
        waves = {c: str(p) for (sid, c), p in sorted(waveform_paths.items()) if sid == s.subject_id}
        entries.append({
            "id": s.subject_id,
            "institution": s.institution,
            "outcome": s.outcome.value,
            "resected": sorted(s.resected_channels),
            "events": str(event_paths[s.subject_id]),
            "waveforms": waves,
        })
    doc = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "subjects": entries}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(tomli_w.dumps(doc).encode("utf-8"))


def load_manifest(path) -> DatasetManifest:
    """Parse and fully resolve a manifest.

    Every subject's event file and every waveform file must exist, every event
    must reference a channel with a waveform, and every event midpoint must lie
    inside its recording.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = tomli.loads(path.read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise DataError(f"{path}: {exc}") from None
    if doc.get("format", MANIFEST_FORMAT) != MANIFEST_FORMAT:
        raise DataError(f"{path}: not a {MANIFEST_FORMAT} file")
    root = path.parent

    subjects: list[SubjectRecord] = []
    event_index: dict[str, Path] = {}
    waveform_index: dict[tuple[str, str], Path] = {}
    counts: dict[str, int] = {}
    seen: set[str] = set()
    for entry in doc.get("subjects", []):
        sid = str(entry["id"])
        if sid in seen:
            raise DataError(f"duplicate subject id {sid!r}")
        seen.add(sid)
        try:
            outcome = Outcome(entry.get("outcome", "unknown"))
        except ValueError:
            raise DataError(f"subject {sid}: unknown outcome {entry.get('outcome')!r}") from None
        waves = {str(c): root / p for c, p in entry.get("waveforms", {}).items()}
        resected = frozenset(str(c) for c in entry.get("resected", []))
        if not resected <= set(waves):
            missing = ", ".join(sorted(resected - set(waves)))
            raise DataError(f"subject {sid}: resected channels without waveforms: {missing}")
        header = {}
        for channel, wpath in waves.items():
            if not wpath.exists():
                raise DataError(f"subject {sid} channel {channel}: waveform file missing ({wpath})")
            header[channel] = read_waveform_header(wpath)
            waveform_index[(sid, channel)] = wpath
        epath = root / entry["events"]
        events = load_events(epath)
        for ev in events:
            if ev.subject_id != sid:
                raise DataError(f"{epath}: event for subject {ev.subject_id!r} listed under {sid!r}")
            if ev.channel_id not in header:
                raise DataError(f"subject {sid} channel {ev.channel_id}: events reference a channel without waveform")
            fs, count = header[ev.channel_id]
            if ev.midpoint_ms * fs / 1000.0 >= count:
                raise DataError(f"event {ev.key} lies outside its recording")
        event_index[sid] = epath
        counts[sid] = len(events)
        subjects.append(SubjectRecord(sid, str(entry.get("institution", "")), outcome, resected))

    manifest = DatasetManifest(tuple(subjects), event_index, waveform_index, root, counts)
    log.info("manifest %s: %d subjects, %d channels, %d events",
             path, len(subjects), len(waveform_index), manifest.n_events)
    return manifest


# --------------------------------------------------------------------------
# windows

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def half_window_samples(window_ms: float, sample_rate: int) -> int:
    return _round_half_up(window_ms / 2.0 * sample_rate / 1000.0)


def extract_window(recording: Recording, event: HfoEvent, window_ms: float = 570.0) -> Window:
    """Fixed-length window centred on the event midpoint, zero-padded at the edges."""
    if window_ms <= 0:
        raise ValueError("window_ms must be positive")
    if (event.subject_id, event.channel_id) != (recording.subject_id, recording.channel_id):
        raise DataError(f"event {event.key} does not belong to {recording.subject_id}/{recording.channel_id}")
    fs = recording.sample_rate
    half = half_window_samples(window_ms, fs)
    center = _round_half_up(event.midpoint_ms * fs / 1000.0)
    n = recording.samples.size
    if center < 0 or center >= n:
        raise DataError(f"event {event.key} midpoint outside recording")
    out = np.zeros(2 * half, dtype=np.float64)
    lo, hi = center - half, center + half
    src_lo, src_hi = max(lo, 0), min(hi, n)
    out[src_lo - lo:src_hi - lo] = recording.samples[src_lo:src_hi]
    return Window(event, out, event.midpoint_ms, fs)


# --------------------------------------------------------------------------
# folds

def _stratified_order(subjects: Sequence[SubjectRecord], rng: np.random.Generator) -> list[str]:
    strata: dict[str, list[str]] = {}
    for s in sorted(subjects, key=lambda s: s.subject_id):
        strata.setdefault(s.institution, []).append(s.subject_id)
    queues = {}
    for inst in sorted(strata):
        ids = strata[inst]
        queues[inst] = [ids[i] for i in rng.permutation(len(ids))]
    n = len(subjects)
    taken = dict.fromkeys(queues, 0)
    order = []
    for i in range(n):
        # largest deficit against the proportional share keeps every block balanced
        inst = max(sorted(queues), key=lambda g: ((i + 1) * len(queues[g]) / n - taken[g]))
        order.append(queues[inst][taken[inst]])
        taken[inst] += 1
    return order


def make_folds(subjects, k: int = 5, seed: int = 0,
               split_ratio: tuple[int, int, int] | None = DEFAULT_SPLIT_RATIO) -> list[FoldSplit]:
    """Subject-wise, institution-stratified k-fold splits.

    With ``split_ratio=(train, val, test)`` every fold has
    ``round(n * test / total)`` test and ``round(n * val / total)`` validation
    subjects, test blocks being disjoint across folds.  With ``split_ratio=None``
    the test blocks partition all subjects and validation takes one fifth of
    the remainder.
    """
    if isinstance(subjects, DatasetManifest):
        subjects = subjects.subjects
    subjects = list(subjects)
    n = len(subjects)
    if k < 2:
        raise ValueError("k must be at least 2")
    if n < k:
        raise ValueError(f"need at least k={k} subjects, got {n}")
    ids = [s.subject_id for s in subjects]
    if len(set(ids)) != n:
        raise DataError("duplicate subject ids")

    rng = np.random.default_rng(seed)
    order = _stratified_order(subjects, rng)

    if split_ratio is None:
        sizes = [n // k + (1 if f < n % k else 0) for f in range(k)]
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).tolist()
        val_sizes = [_round_half_up((n - sz) / 5.0) for sz in sizes]
    else:
        total = sum(split_ratio)
        n_test = max(1, _round_half_up(n * split_ratio[2] / total))
        n_val = _round_half_up(n * split_ratio[1] / total)
        if k * n_test > n:
            raise ValueError(f"{k} disjoint test sets of {n_test} do not fit in {n} subjects")
        if n_test + n_val >= n:
            raise ValueError("split leaves no training subjects")
        sizes = [n_test] * k
        starts = [f * n_test for f in range(k)]
        val_sizes = [n_val] * k

    institution = {s.subject_id: s.institution for s in subjects}
    tests = [[order[(starts[f] + i) % n] for i in range(sizes[f])] for f in range(k)]
    free = set(ids) - set().union(*map(set, tests))
    folds = []
    for f in range(k):
        test = tests[f]
        val_start = starts[f] + sizes[f]
        val = [order[(val_start + i) % n] for i in range(val_sizes[f])]
        train = sorted(set(ids) - set(test) - set(val))
        parts = _rebalance([list(test), val, train], institution, free)
        folds.append(FoldSplit(f, frozenset(parts[2]), frozenset(parts[1]), frozenset(parts[0])))
    return folds


def _imbalance(parts, institution, share, n) -> float:
    total = 0.0
    for part in parts:
        counts: dict[str, int] = {}
        for sid in part:
            counts[institution[sid]] = counts.get(institution[sid], 0) + 1
        for g, c in share.items():
            total += max(0.0, abs(counts.get(g, 0) - c * len(part) / n) - 1.0)
    return total


def _rebalance(parts, institution, free, max_rounds: int = 100):
    """Swap subjects between parts until every part is within one subject of its institution share.

    Test members only swap with subjects outside every test block, so test
    sets stay disjoint across folds.
    """
    n = sum(len(p) for p in parts)
    share: dict[str, int] = {}
    for sid in institution:
        share[institution[sid]] = share.get(institution[sid], 0) + 1
    current = _imbalance(parts, institution, share, n)
    for _ in range(max_rounds):
        if current == 0.0:
            break
        best = None
        for a, b in ((0, 1), (0, 2), (1, 2)):
            for i, x in enumerate(parts[a]):
                for j, y in enumerate(parts[b]):
                    if institution[x] == institution[y]:
                        continue
                    if a == 0 and y not in free:
                        continue
                    trial = [list(p) for p in parts]
                    trial[a][i], trial[b][j] = y, x
                    score = _imbalance(trial, institution, share, n)
                    if score < current - 1e-12 and (best is None or score < best[0]):
                        best = (score, trial)
        if best is None:
            break
        current, parts = best
    return parts
