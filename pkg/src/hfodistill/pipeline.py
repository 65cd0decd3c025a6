"""Stage runners over a work directory.

Layout::

    ingest/events.csv, ingest/images.npy, ingest/source.json, folds.json
    fold_<f>/vae.ckpt, train_log.csv          pretrain
    fold_<f>/weak_labels.csv, clusters.json   discover
    <out>/fold_<f>/classifier.ckpt            train
    <out>/fold_<f>/predictions.csv            evaluate
    <out>/report.json, report.md, outcome_model.csv

``<out>`` is the work directory itself or ``variants/<name>`` for ablations
that re-run only the classifier and evaluation stages.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import classifier as C
from . import evaluation as E
from . import labels as L
from . import latent as LA
from . import vae as V
from .checkpoint import Checkpoint
from .config import RunConfig
from .data import (DatasetManifest, FoldSplit, Outcome, extract_window, load_events,
                   load_manifest, make_folds, write_events)
from .tf import images_from_windows, window_to_image, write_tf_dump

log = logging.getLogger(__name__)


class MissingArtifact(FileNotFoundError):
    """An upstream stage output is absent."""


def require(path: Path, stage: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifact(f"missing {path} (run the '{stage}' stage first)")
    return Path(path)


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def fold_dir(root, fold: int) -> Path:
    return Path(root) / f"fold_{fold}"


def output_root(work, variant: str | None) -> Path:
    return Path(work) / "variants" / variant if variant else Path(work)


# --------------------------------------------------------------------------
# event table

@dataclass
class EventTable:
    events: list
    images: np.ndarray
    manifest: DatasetManifest

    @property
    def keys(self) -> np.ndarray:
        return np.array([e.key for e in self.events])

    @property
    def subjects(self) -> np.ndarray:
        return np.array([e.subject_id for e in self.events])

    @property
    def resected(self) -> np.ndarray:
        res = {s.subject_id: s.resected_channels for s in self.manifest.subjects}
        return np.array([e.channel_id in res[e.subject_id] for e in self.events], dtype=bool)

    @property
    def annotated(self) -> np.ndarray:
        has_map = {s.subject_id: bool(s.resected_channels) for s in self.manifest.subjects}
        return np.array([has_map[e.subject_id] for e in self.events], dtype=bool)

    def mask(self, subjects) -> np.ndarray:
        return np.isin(self.subjects, sorted(subjects))


def ingest(manifest_path, work, cfg: RunConfig, dump_tf: int = 0) -> EventTable:
    """Windows and scalogram images for every event, plus fold assignment."""
    manifest = load_manifest(manifest_path)
    events = manifest.load_events()
    if not events:
        raise ValueError("manifest lists no events")
    windows, cache = [], {}
    for ev in events:
        rk = (ev.subject_id, ev.channel_id)
        if rk not in cache:
            cache.clear()
            cache[rk] = manifest.load_recording(*rk)
        windows.append(extract_window(cache[rk], ev, cfg.data.window_ms))
    d = cfg.data
    images = images_from_windows(windows, d.image_size, f_min=d.f_min, f_max=d.f_max)
    base = Path(work) / "ingest"
    base.mkdir(parents=True, exist_ok=True)
    write_events(base / "events.csv", events)
    tmp = base / "images.tmp.npy"
    np.save(tmp, images)
    os.replace(tmp, base / "images.npy")
    write_text_atomic(base / "source.json",
                      json.dumps({"manifest": str(Path(manifest_path).resolve())}, indent=2) + "\n")
    folds = make_folds(manifest, cfg.folds.k, cfg.folds.seed, cfg.folds.split_ratio)
    write_folds(Path(work) / "folds.json", folds)
    for i in range(min(dump_tf, len(windows))):
        w = windows[i]
        img = window_to_image(w.samples, w.sample_rate, d.image_size, d.f_min, d.f_max)
        write_tf_dump(base / "tf_dump", f"event_{i:05d}", img)
    log.info("ingested %d events from %d subjects", len(events), len(manifest.subjects))
    return EventTable(events, images, manifest)


def load_table(work) -> EventTable:
    base = Path(work) / "ingest"
    src = json.loads(require(base / "source.json", "ingest").read_text(encoding="utf-8"))
    events = load_events(require(base / "events.csv", "ingest"))
    images = np.load(require(base / "images.npy", "ingest"))
    return EventTable(events, images, load_manifest(src["manifest"]))


def write_folds(path, folds) -> None:
    payload = [{"fold": f.fold_id, "train": sorted(f.train), "val": sorted(f.val), "test": sorted(f.test)}
               for f in folds]
    write_text_atomic(path, json.dumps(payload, indent=2) + "\n")


def read_folds(work) -> list[FoldSplit]:
    raw = json.loads(require(Path(work) / "folds.json", "ingest").read_text(encoding="utf-8"))
    return [FoldSplit(r["fold"], frozenset(r["train"]), frozenset(r["val"]), frozenset(r["test"])) for r in raw]


def _select(folds, which):
    return folds if which is None else [f for f in folds if f.fold_id in set(which)]


# --------------------------------------------------------------------------
# stages

def run_pretrain(work, cfg: RunConfig, folds=None) -> dict:
    table = load_table(work)
    out = {}
    for f in _select(read_folds(work), folds):
        res = V.pretrain(table.images, table.subjects, f.train, f.val, cfg.vae, cfg.pretrain,
                         out_dir=fold_dir(work, f.fold_id))
        out[f.fold_id] = res
    return out


def _clusters_payload(disc: L.Discovery) -> dict:
    bg, path = disc.background, disc.pathological
    return {
        "stage1_centroids": bg.model.centroids.tolist(), "noise_cluster": bg.noise_cluster,
        "stage1_mean_losses": list(bg.mean_losses),
        "stage2_centroids": path.model.centroids.tolist(),
        "pathological_cluster": path.pathological_cluster,
        "resected_fractions": list(path.resected_fractions), "tie": path.tie,
    }


def cluster_labels(clusters: dict, codes) -> np.ndarray:
    """Weak-label rule applied to arbitrary codes: pathological unless background or the other HFO cluster."""
    codes = np.asarray(codes, dtype=np.float64)
    s1 = L.ClusterModel(np.array(clusters["stage1_centroids"]), np.zeros(0, int), 0.0).predict(codes)
    s2 = L.ClusterModel(np.array(clusters["stage2_centroids"]), np.zeros(0, int), 0.0).predict(codes)
    return ((s1 != clusters["noise_cluster"]) & (s2 == clusters["pathological_cluster"])).astype(int)


def run_discover(work, cfg: RunConfig, folds=None) -> dict:
    """Two-stage clustering on each fold's training events."""
    table = load_table(work)
    out = {}
    for f in _select(read_folds(work), folds):
        fd = fold_dir(work, f.fold_id)
        ckpt = Checkpoint.load(require(fd / "vae.ckpt", "pretrain"))
        idx = np.flatnonzero(table.mask(f.train))
        mu, _ = V.encode_images(V.load_vae(ckpt), table.images[idx])
        losses = V.per_event_reconstruction_loss(table.images[idx], ckpt)
        disc = L.discover_labels(mu, losses, table.resected[idx], table.annotated[idx], table.keys[idx],
                                 seed=cfg.labels.seed)
        events = [table.events[i] for i in idx]
        L.write_weak_labels(fd / "weak_labels.csv", L.assign_weak_labels(events, disc.stage_tags))
        write_text_atomic(fd / "clusters.json", json.dumps(_clusters_payload(disc), indent=2) + "\n")
        log.info("fold %d: %d noise, %d pathological of %d training events", f.fold_id,
                 int(disc.background.is_noise.sum()), int(disc.labels.sum()), idx.size)
        out[f.fold_id] = disc
    return out


def run_train(work, cfg: RunConfig, folds=None, variant: str | None = None) -> dict:
    table = load_table(work)
    root = output_root(work, variant)
    out = {}
    for f in _select(read_folds(work), folds):
        fd = fold_dir(work, f.fold_id)
        ckpt = Checkpoint.load(require(fd / "vae.ckpt", "pretrain"))
        weak = L.read_weak_labels(require(fd / "weak_labels.csv", "discover"))
        keys = table.keys
        idx = np.array([i for i, k in enumerate(keys) if k in weak], dtype=int)
        labels = np.array([weak[keys[i]][0] for i in idx])
        target = fold_dir(root, f.fold_id) / "classifier.ckpt"
        if cfg.distill.sd:
            res = C.train_classifier(table.images[idx], labels, keys[idx], ckpt, cfg.classifier_effective)
            res.checkpoint.save(target)
            out[f.fold_id] = res
        else:
            # without distillation the weak-label rule itself is the classifier
            require(fd / "clusters.json", "discover")
            ckpt.with_section("classifier", {}, classifier_config=None, distill=False).save(target)
            out[f.fold_id] = None
    return out


def predict_fold(table: EventTable, work, fold: int, cfg: RunConfig, variant: str | None = None):
    root = output_root(work, variant)
    path = require(fold_dir(root, fold) / "classifier.ckpt", "train")
    ckpt = Checkpoint.load(path)
    if ckpt.header.get("distill") is False:
        clusters = json.loads(require(fold_dir(work, fold) / "clusters.json", "discover").read_text())
        mu, _ = V.encode_images(V.load_vae(ckpt), table.images)
        labels = cluster_labels(clusters, mu)
        return labels.astype(np.float64), labels
    return C.predict(table.images, ckpt, cfg.classifier.threshold)


def _subject_rows(table: EventTable, labels: np.ndarray, fold: FoldSplit) -> list[dict]:
    rows = []
    subj = table.subjects
    channels = np.array([e.channel_id for e in table.events])
    for s in table.manifest.subjects:
        role = fold.role(s.subject_id)
        if role == "unused" or not s.has_outcome:
            continue
        m = subj == s.subject_id
        rr = E.resection_ratio(labels[m], channels[m], s.resected_channels)
        spec = E.specificity(labels[m], channels[m], s.resected_channels) if s.seizure_free else None
        rows.append({"fold": fold.fold_id, "subject": s.subject_id, "role": role, "outcome": s.outcome.value,
                     "rr": rr, "rr_imputed": rr is None, "specificity": spec,
                     "n_events": int(m.sum()), "n_pathological": int(labels[m].sum())})
    return rows


def run_evaluate(work, cfg: RunConfig, folds=None, variant: str | None = None) -> E.MetricsReport:
    table = load_table(work)
    root = output_root(work, variant)
    fold_metrics, subject_rows, models = [], [], []
    for f in _select(read_folds(work), folds):
        probs, labels = predict_fold(table, work, f.fold_id, cfg, variant)
        C.write_predictions(fold_dir(root, f.fold_id) / "predictions.csv", table.events, probs, labels)
        rows = _subject_rows(table, labels, f)
        fit = [r for r in rows if r["role"] in ("train", "val")]
        test = [r for r in rows if r["role"] == "test"]
        y_fit = [int(r["outcome"] == Outcome.SEIZURE_FREE.value) for r in fit]
        model = E.fit_outcome_model([r["rr"] for r in fit], y_fit)
        models.append((f.fold_id, model))
        y_test = np.array([int(r["outcome"] == Outcome.SEIZURE_FREE.value) for r in test])
        pred = model.predict(E.impute_rr([r["rr"] for r in test])) if test else np.zeros(0, int)
        for r, p in zip(test, pred):
            r["predicted_success"] = int(p)
        scores = E.accuracy_f1(pred, y_test) if test else E.Scores(float("nan"), float("nan"), False)
        specs = [r["specificity"] for r in test if r["specificity"] is not None]
        fold_metrics.append(E.FoldMetrics(f.fold_id, scores.acc, scores.f1, scores.f1_defined, model.weight,
                                          model.bias, float(np.mean(specs)) if specs else None, len(test)))
        subject_rows.extend(test)
    report = E.MetricsReport.from_folds(fold_metrics, subject_rows,
                                        extra={"config_hash": cfg.config_hash(), "variant": variant or "main",
                                               "f1_positive_class": "seizure_free"})
    root.mkdir(parents=True, exist_ok=True)
    write_text_atomic(root / "report.json", report.to_json())
    write_text_atomic(root / "report.md", report.to_markdown())
    lines = ["fold,weight,bias"] + [f"{fid},{m.weight!r},{m.bias!r}" for fid, m in models]
    write_text_atomic(root / "outcome_model.csv", "\n".join(lines) + "\n")
    return report


# --------------------------------------------------------------------------
# latent analysis

def _latent_inputs(work, fold: int, variant: str | None):
    table = load_table(work)
    root = output_root(work, variant)
    ckpt = Checkpoint.load(require(fold_dir(root, fold) / "classifier.ckpt", "train"))
    preds = C.read_predictions(require(fold_dir(root, fold) / "predictions.csv", "evaluate"))
    keys = table.keys
    probs = np.array([preds[k][0] for k in keys])
    labels = np.array([preds[k][1] for k in keys])
    mu, _ = V.encode_images(V.load_vae(ckpt), table.images)
    return table, ckpt, mu, probs, labels


def run_sweep(work, cfg: RunConfig, fold: int = 0, variant: str | None = None) -> list[Path]:
    _, ckpt, mu, _, labels = _latent_inputs(work, fold, variant)
    seed = LA.seed_code(mu, labels)
    a = cfg.analysis
    sweeps = {d: LA.interpolate_dimension(LA.SweepSpec(seed, d, a.steps, a.lo_q, a.hi_q), mu, ckpt)
              for d in range(mu.shape[1])}
    return LA.render_sweeps(output_root(work, variant) / "latent" / f"fold_{fold}", sweeps)


def run_knockout(work, cfg: RunConfig, fold: int = 0, variant: str | None = None) -> list[Path]:
    table, _, mu, probs, labels = _latent_inputs(work, fold, variant)
    results = {d: LA.knockout_analysis(mu, probs, labels, d, cfg.analysis.mixing_k) for d in range(mu.shape[1])}
    return LA.render_knockout(output_root(work, variant) / "latent" / f"fold_{fold}", table.keys, results,
                              probs, labels)


def read_report(work, variant: str | None = None) -> dict:
    path = require(output_root(work, variant) / "report.json", "evaluate")
    return json.loads(path.read_text(encoding="utf-8"))


__all__ = ["EventTable", "MissingArtifact", "ingest", "load_table", "read_folds", "run_pretrain", "run_discover",
           "run_train", "run_evaluate", "run_sweep", "run_knockout", "read_report", "cluster_labels"]
