import numpy as np
import pytest

from hfodistill import synth
from hfodistill.data import Outcome, load_manifest
from hfodistill.synth import SynthConfig, generate_dataset, generate_event_waveform
from hfodistill.tf import log_frequencies, morlet_scalogram

FS = 2000


def _burst_scalogram(kind, seed, snr_db=30.0):
    rng = np.random.default_rng(seed)
    b = generate_event_waveform(kind, FS, rng, snr_db=snr_db)
    return b, morlet_scalogram(b.samples, FS, 10, 450, 96)


def test_physiological_peak_in_ripple_band():
    freqs = log_frequencies(10, 450, 96)
    step = freqs[1] / freqs[0]
    hits = 0
    for seed in range(40):
        _, s = _burst_scalogram("physiological", seed)
        f = freqs[np.argmax(s.max(axis=1))]
        hits += 90 / step <= f <= 150 * step  # one grid bin of slack
    assert hits / 40 >= 0.95


def test_pathological_has_fast_ripple_and_broadband_spike():
    freqs = log_frequencies(10, 450, 96)
    ok = 0
    for seed in range(40):
        _, s = _burst_scalogram("pathological", seed)
        fast = s[freqs > 250].max()
        centre = s.shape[1] // 2
        column = s[:, centre - 20:centre + 20].max(axis=1)
        # the spike puts energy below the ripple bands at the event time
        broadband = np.mean(column[(freqs > 20) & (freqs < 80)] > 0.05 * column.max())
        ok += fast > 0.2 * s.max() and broadband > 0.5
    assert ok / 40 >= 0.95


def test_silent_burst_at_minus_infinity_snr():
    b = generate_event_waveform("noise", FS, np.random.default_rng(0), snr_db=-np.inf)
    assert np.all(b.samples == 0.0)


def test_event_rms_matches_snr():
    rng = np.random.default_rng(5)
    b = generate_event_waveform("physiological", FS, rng, snr_db=20.0, floor_rms=10.0)
    t = (np.arange(b.samples.size) - b.samples.size // 2) / FS * 1000
    rms = np.sqrt(np.mean(b.samples[np.abs(t) <= b.duration_ms / 2] ** 2))
    assert rms == pytest.approx(100.0, rel=1e-9)


def test_unknown_class():
    with pytest.raises(ValueError):
        generate_event_waveform("spindle", FS, np.random.default_rng(0))


def test_colored_noise_unit_rms():
    x = synth.colored_noise(4096, np.random.default_rng(0), FS)
    assert np.sqrt(np.mean(x ** 2)) == pytest.approx(1.0)


@pytest.mark.parametrize("kw", [dict(class_mix=(0.5, 0.5, 0.5)), dict(n_subjects=0),
                                dict(resected_per_subject=8), dict(snr_db=10, resection_coverage=1.5)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)


@pytest.fixture(scope="module")
def small():
    return generate_dataset(SynthConfig(n_subjects=6, events_per_subject=40))


def test_counts_full_size():
    counts = synth._class_counts(200, (0.3, 0.4, 0.3))
    assert 20 * counts[0] == 1200 and 20 * sum(counts) == 4000


def test_class_counts_per_subject(small):
    truth = [small.truth[e.key] for e in small.events]
    assert len(small.events) == 240
    assert truth.count("pathological") == 6 * 12


def test_seizure_free_pathology_in_resected_channels(small):
    for s in small.subjects:
        path = [e for e in small.events if e.subject_id == s.subject_id and small.truth[e.key] == "pathological"]
        inside = sum(e.channel_id in s.resected_channels for e in path)
        if s.outcome is Outcome.SEIZURE_FREE:
            assert inside == len(path)
        else:
            assert 0 < inside < len(path)


def test_events_separated_by_a_window(small):
    by_channel = {}
    for e in small.events:
        by_channel.setdefault((e.subject_id, e.channel_id), []).append(e.midpoint_ms)
    for mids in by_channel.values():
        assert np.all(np.diff(sorted(mids)) >= 570.0)


def test_deterministic_waveforms():
    a = generate_dataset(SynthConfig(n_subjects=3, events_per_subject=10, seed=4))
    b = generate_dataset(SynthConfig(n_subjects=3, events_per_subject=10, seed=4))
    assert a.events == b.events
    for key in a.recordings:
        assert a.recordings[key].samples.tobytes() == b.recordings[key].samples.tobytes()


def test_written_dataset_loads(tmp_path):
    ds = generate_dataset(SynthConfig(n_subjects=3, events_per_subject=10), tmp_path)
    m = load_manifest(tmp_path / "manifest.toml")
    assert m.load_events() == ds.events
    assert synth.read_ground_truth(tmp_path / "ground_truth.csv") == ds.truth
    assert (tmp_path / "ground_truth.csv").read_text().splitlines()[0] == "subject,channel,start_ms,end_ms,true_class"
