"""Synthetic multi-subject iEEG with planted event morphologies.

Three classes are planted on a coloured-noise floor:

* ``pathological``: fast-ripple burst (250-290 Hz) riding on a sharp spike
* ``physiological``: ripple burst (90-150 Hz)
* ``noise``: band-limited white-noise artifact spanning most of the spectrum

Seizure-free subjects carry their pathological events in resected channels;
for the others most pathological events sit in preserved channels.  Ground
truth is written separately and is only used for scoring.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .data import (DatasetManifest, HfoEvent, Outcome, Recording, SubjectRecord, load_manifest,
                   write_events, write_manifest, write_waveform)

CLASSES = ("pathological", "physiological", "noise")
# broadband artifacts span most of the 570 ms analysis window
NOISE_DURATION_MS = (400.0, 560.0)


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 20
    events_per_subject: int = 200
    channels_per_subject: int = 8
    resected_per_subject: int = 2
    sample_rate: int = 2000
    class_mix: tuple = (0.3, 0.4, 0.3)
    snr_db: float = 15.0
    resection_coverage: float = 1.0
    # share of pathological events in resected channels when surgery failed
    failure_resected_fraction: float = 0.2
    seizure_free_fraction: float = 2 / 3
    n_institutions: int = 2
    floor_rms: float = 10.0
    window_ms: float = 570.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_subjects", "events_per_subject", "channels_per_subject", "sample_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if len(self.class_mix) != 3 or min(self.class_mix) < 0 or not math.isclose(sum(self.class_mix), 1.0):
            raise ValueError("class_mix must be three non-negative proportions summing to 1")
        if not 0 < self.resected_per_subject < self.channels_per_subject:
            raise ValueError("resected_per_subject must leave at least one preserved channel")
        for name in ("resection_coverage", "failure_resected_fraction", "seizure_free_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.n_institutions < 1:
            raise ValueError("n_institutions must be positive")


@dataclass
class SyntheticBurst:
    samples: np.ndarray
    duration_ms: float


@dataclass
class SyntheticDataset:
    config: SynthConfig
    subjects: list[SubjectRecord]
    recordings: dict = field(repr=False)  # (subject, channel) -> Recording
    events: list[HfoEvent] = field(repr=False)
    truth: dict = field(repr=False)  # event key -> class name
    manifest: DatasetManifest | None = None

    def true_class(self, event: HfoEvent) -> str:
        return self.truth[event.key]


def colored_noise(n: int, rng: np.random.Generator, fs: float, exponent: float = 1.0) -> np.ndarray:
    """Unit-RMS noise with a ``1/f**exponent`` amplitude spectrum (floor at 1 Hz)."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, d=1.0 / fs)
    spec = spec / np.maximum(f, 1.0) ** exponent
    spec[0] = 0.0
    x = np.fft.irfft(spec, n)
    rms = np.sqrt(np.mean(x ** 2))
    return x / rms if rms > 0 else x


def _gauss(t, sigma):
    return np.exp(-0.5 * (t / sigma) ** 2)


def generate_event_waveform(kind: str, fs: float, rng: np.random.Generator, snr_db: float = 15.0,
                            floor_rms: float = 10.0) -> SyntheticBurst:
    """One planted event, centred in a buffer of at least 400 ms.

    The oscillatory part is scaled so its RMS over the event interval is
    ``snr_db`` above ``floor_rms``; ``snr_db=-inf`` yields silence.
    """
    if kind not in CLASSES:
        raise ValueError(f"unknown event class {kind!r}")
    dur = rng.uniform(*NOISE_DURATION_MS) if kind == "noise" else 0.0
    n = int(round(max(0.4, dur / 1000.0 + 0.04) * fs))
    t = (np.arange(n) - n // 2) / fs * 1000.0  # ms
    amp = floor_rms * 10.0 ** (snr_db / 20.0) if np.isfinite(snr_db) else 0.0

    if kind == "physiological":
        freq = rng.uniform(90.0, 150.0)
        dur = rng.uniform(30.0, 70.0)
        env = _gauss(t, dur / 4.0)
        burst = env * np.sin(2 * np.pi * freq * t / 1000.0 + rng.uniform(0, 2 * np.pi))
        spike = np.zeros(n)
    elif kind == "pathological":
        freq = rng.uniform(250.0, 290.0)
        dur = rng.uniform(20.0, 40.0)
        env = _gauss(t, dur / 4.0)
        burst = env * np.sin(2 * np.pi * freq * t / 1000.0 + rng.uniform(0, 2 * np.pi))
        width = rng.uniform(3.0, 6.0)
        lag = rng.uniform(-3.0, 3.0)
        # sharp negative spike followed by a slow positive after-wave
        spike = -_gauss(t - lag, width) + 0.35 * _gauss(t - lag - 4 * width - 25.0, 20.0)
    else:
        white = rng.standard_normal(n)
        sos = signal.butter(4, [20.0, min(450.0, 0.45 * fs)], btype="bandpass", fs=fs, output="sos")
        colored = signal.sosfiltfilt(sos, white)
        taper = signal.windows.tukey(max(int(round(dur * fs / 1000.0)), 3), alpha=rng.uniform(0.2, 0.8))
        env = np.zeros(n)
        start = n // 2 - taper.size // 2
        env[start:start + taper.size] = taper
        burst = env * colored
        spike = np.zeros(n)

    inside = np.abs(t) <= dur / 2.0
    rms = np.sqrt(np.mean(burst[inside] ** 2)) if np.any(inside) else 0.0
    scale = amp / rms if rms > 0 else 0.0
    samples = scale * burst
    if kind == "pathological":
        samples = samples + amp * rng.uniform(1.0, 2.0) * spike
    return SyntheticBurst(samples, float(dur))


def _subject_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def _class_counts(n: int, mix) -> list[int]:
    n_path = int(round(n * mix[0]))
    n_phys = int(round(n * mix[1]))
    return [n_path, n_phys, max(n - n_path - n_phys, 0)]


def _generate_subject(cfg: SynthConfig, index: int, subject: SubjectRecord, channels: list[str]):
    rng = _subject_rng(cfg.seed, index)
    fs = cfg.sample_rate
    resected = sorted(subject.resected_channels)
    preserved = [c for c in channels if c not in subject.resected_channels]

    counts = _class_counts(cfg.events_per_subject, cfg.class_mix)
    placed: list[tuple[str, str]] = []  # (class, channel)
    n_path = counts[0]
    if subject.outcome is Outcome.SEIZURE_FREE:
        n_in = int(math.ceil(cfg.resection_coverage * n_path))
    else:
        n_in = int(round(cfg.failure_resected_fraction * n_path))
    for i in range(n_path):
        pool = resected if i < n_in else preserved
        placed.append(("pathological", pool[rng.integers(len(pool))]))
    for kind, count in zip(CLASSES[1:], counts[1:]):
        for _ in range(count):
            placed.append((kind, channels[rng.integers(len(channels))]))

    slot_ms = cfg.window_ms + 100.0
    recordings, events, truth = {}, [], {}
    for ch in channels:
        kinds = [k for k, c in placed if c == ch]
        kinds = [kinds[i] for i in rng.permutation(len(kinds))]
        n_samples = int(math.ceil((len(kinds) + 1) * slot_ms * fs / 1000.0))
        x = cfg.floor_rms * colored_noise(n_samples, rng, fs)
        for j, kind in enumerate(kinds):
            mid_ms = (j + 1) * slot_ms + rng.uniform(-50.0, 50.0)
            burst = generate_event_waveform(kind, fs, rng, cfg.snr_db, cfg.floor_rms)
            c = int(round(mid_ms * fs / 1000.0))
            half = burst.samples.size // 2
            lo = c - half
            x[lo:lo + burst.samples.size] += burst.samples
            # detector-style interval with a little boundary jitter
            start = round(mid_ms - burst.duration_ms / 2.0 + rng.uniform(-2.0, 2.0), 3)
            end = round(mid_ms + burst.duration_ms / 2.0 + rng.uniform(-2.0, 2.0), 3)
            ev = HfoEvent(subject.subject_id, ch, float(start), float(end), "synthetic")
            events.append(ev)
            truth[ev.key] = kind
        recordings[(subject.subject_id, ch)] = Recording(subject.subject_id, ch, fs, x.astype(np.float32))
    return recordings, events, truth


def generate_dataset(config: SynthConfig, out_dir=None) -> SyntheticDataset:
    """Build the dataset; with ``out_dir`` also write manifest, events, waveforms and ground truth."""
    cfg = config
    meta = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2**31 - 1]))
    order = meta.permutation(cfg.n_subjects)
    n_free = int(round(cfg.seizure_free_fraction * cfg.n_subjects))
    free = set(order[:n_free].tolist())

    width = max(2, len(str(cfg.n_subjects - 1)))
    channels = [f"ch{c:02d}" for c in range(cfg.channels_per_subject)]
    subjects = []
    for i in range(cfg.n_subjects):
        outcome = Outcome.SEIZURE_FREE if i in free else Outcome.NOT_SEIZURE_FREE
        subjects.append(SubjectRecord(f"sub{i:0{width}d}", f"inst{i % cfg.n_institutions}", outcome,
                                      frozenset(channels[:cfg.resected_per_subject])))

    recordings, events, truth = {}, [], {}
    for i, s in enumerate(subjects):
        r, e, t = _generate_subject(cfg, i, s, channels)
        recordings.update(r)
        events.extend(e)
        truth.update(t)
    events.sort()
    ds = SyntheticDataset(cfg, subjects, recordings, events, truth)
    if out_dir is not None:
        ds.manifest = write_dataset(ds, out_dir)
    return ds


def write_dataset(ds: SyntheticDataset, out_dir) -> DatasetManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    event_paths, wave_paths = {}, {}
    for s in ds.subjects:
        rel = f"events/{s.subject_id}.csv"
        write_events(out / rel, [e for e in ds.events if e.subject_id == s.subject_id])
        event_paths[s.subject_id] = rel
    for (sid, ch), rec in sorted(ds.recordings.items()):
        rel = f"waveforms/{sid}_{ch}.hfow"
        write_waveform(out / rel, rec)
        wave_paths[(sid, ch)] = rel
    write_manifest(out / "manifest.toml", ds.subjects, event_paths, wave_paths)
    write_ground_truth(out / "ground_truth.csv", ds.events, ds.truth)
    return load_manifest(out / "manifest.toml")


def write_ground_truth(path, events, truth) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "channel", "start_ms", "end_ms", "true_class"])
        for ev in sorted(events):
            w.writerow([ev.subject_id, ev.channel_id, repr(ev.start_ms), repr(ev.end_ms), truth[ev.key]])


def read_ground_truth(path) -> dict:
    """Map event key -> planted class."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ev = HfoEvent(row["subject"], row["channel"], float(row["start_ms"]), float(row["end_ms"]))
            out[ev.key] = row["true_class"]
    return out
