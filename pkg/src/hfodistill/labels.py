"""Weak labels from two-stage k-means in the VAE latent space.

Stage 1 separates background noise (the cluster the VAE reconstructs worse)
from HFO events; stage 2 splits the HFO events and calls the cluster with the
larger share of events in resected channels pathological.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import HfoEvent, stable_hash64

log = logging.getLogger(__name__)

NOISE, PHYSIOLOGICAL, PATHOLOGICAL = "noise", "physiological", "pathological"
WEAK_LABEL_HEADER = ("subject", "channel", "start_ms", "end_ms", "stage_tag", "l")


@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float
    n_iter: int = 0

    def predict(self, points) -> np.ndarray:
        return _assign(np.asarray(points, dtype=np.float64), self.centroids)[0]


@dataclass(frozen=True)
class WeakLabel:
    event: HfoEvent
    l: int
    stage_tag: str


# --------------------------------------------------------------------------
# k-means

def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _assign(points, centroids):
    d = _sq_dists(points, centroids)
    a = np.argmin(d, axis=1)  # ties go to the lowest centroid index
    return a, d[np.arange(len(points)), a]


def _uniforms(keys: np.ndarray, *salt: int) -> np.ndarray:
    """Per-point uniforms in (0, 1) derived from point keys, not positions."""
    prefix = "|".join(str(s) for s in salt)
    h = np.array([stable_hash64(f"{prefix}|{k}") for k in keys], dtype=np.uint64)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0 ** 53


def kmeans_pp_init(points: np.ndarray, k: int, keys: np.ndarray, seed: int, restart: int) -> np.ndarray:
    """k-means++ seeding; each draw is a keyed weighted race so input order is irrelevant."""
    n = len(points)
    u = _uniforms(keys, seed, restart, 0)
    first = int(np.argmax(u))
    centroids = [points[first]]
    d2 = _sq_dists(points, np.array(centroids))[:, 0]
    for j in range(1, k):
        u = _uniforms(keys, seed, restart, j)
        with np.errstate(divide="ignore"):
            race = np.where(d2 > 0, np.log(u) / np.where(d2 > 0, d2, 1.0), -np.inf)
        pick = int(np.argmax(race)) if np.any(d2 > 0) else int(np.argmax(u))
        centroids.append(points[pick])
        d2 = np.minimum(d2, _sq_dists(points, points[pick][None])[:, 0])
    return np.array(centroids, dtype=np.float64).reshape(k, points.shape[1]) if n else np.zeros((k, 0))


def lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int = 300, tol: float = 1e-6) -> ClusterModel:
    """Lloyd iterations until the largest centroid move is at most ``tol``.

    An empty cluster is re-seeded at the point farthest from its centroid.
    """
    c = np.array(centroids, dtype=np.float64)
    k = len(c)
    a, d = _assign(points, c)
    it = 0
    for it in range(1, max_iter + 1):
        new = c.copy()
        for j in range(k):
            members = points[a == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                far = int(np.argmax(d))
                new[j] = points[far]
                log.debug("empty cluster %d re-seeded at point %d", j, far)
        shift = float(np.max(np.sqrt(np.sum((new - c) ** 2, axis=1))))
        c = new
        a, d = _assign(points, c)
        if shift <= tol:
            break
    return ClusterModel(c, a, float(d.sum()), it)


def kmeans(points, k: int = 2, n_restarts: int = 10, max_iter: int = 300, tol: float = 1e-6, seed: int = 0,
           keys: Sequence | None = None) -> ClusterModel:
    """Best-of-restarts Lloyd's k-means with k-means++ seeding.

    ``keys`` identify points (event ids); results do not depend on the order
    in which points are given.  Without keys the row index is used.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("points must be a 2-d array")
    n = len(x)
    if n < k:
        raise ValueError(f"k-means needs at least k={k} points, got {n}")
    keys = np.asarray([str(i) for i in range(n)] if keys is None else [str(key) for key in keys])
    if len(set(keys.tolist())) != n:
        raise ValueError("point keys must be unique")
    if len(np.unique(x, axis=0)) < k:
        log.warning("fewer than k=%d distinct points; clusters will be degenerate", k)

    # canonical order by key makes every floating-point reduction order-free
    order = np.argsort(keys, kind="stable")
    xs, ks = x[order], keys[order]
    best = None
    for r in range(n_restarts):
        model = lloyd(xs, kmeans_pp_init(xs, k, ks, seed, r), max_iter, tol)
        if best is None or model.inertia < best.inertia:
            best = model
    assignment = np.empty(n, dtype=int)
    assignment[order] = best.assignment
    return ClusterModel(best.centroids, assignment, best.inertia, best.n_iter)


# --------------------------------------------------------------------------
# two-stage discovery

@dataclass(frozen=True)
class BackgroundSplit:
    model: ClusterModel
    noise_cluster: int
    is_noise: np.ndarray
    mean_losses: tuple


def split_background(latent_codes, recon_losses, keys=None, seed: int = 0, **kw) -> BackgroundSplit:
    """k-means (k=2) on encoder means; the cluster with higher mean reconstruction loss is noise.

    Equal mean losses fall back to the smaller cluster, then to cluster 1.
    """
    losses = np.asarray(recon_losses, dtype=np.float64)
    model = kmeans(latent_codes, 2, seed=seed, keys=keys, **kw)
    sizes = np.bincount(model.assignment, minlength=2)
    means = tuple(float(losses[model.assignment == j].mean()) if sizes[j] else -np.inf for j in range(2))
    if means[0] != means[1]:
        noise = int(np.argmax(means))
    elif sizes[0] != sizes[1]:
        noise = int(np.argmin(sizes))
    else:
        noise = 1
    return BackgroundSplit(model, noise, model.assignment == noise, means)


@dataclass(frozen=True)
class PathologicalSplit:
    model: ClusterModel
    pathological_cluster: int
    resected_fractions: tuple
    tie: bool = False


def split_pathological(hfo_codes, resected_flags, recon_losses=None, keys=None, seed: int = 0,
                       **kw) -> PathologicalSplit:
    """k-means (k=2) on HFO-event means; the cluster with the larger resected fraction is pathological."""
    flags = np.asarray(resected_flags, dtype=bool)
    model = kmeans(hfo_codes, 2, seed=seed, keys=keys, **kw)
    fracs = tuple(float(flags[model.assignment == j].mean()) if np.any(model.assignment == j) else 0.0
                  for j in range(2))
    if fracs[0] != fracs[1]:
        return PathologicalSplit(model, int(np.argmax(fracs)), fracs)
    log.error("pathological cluster tie: both clusters have resected fraction %.4f", fracs[0])
    if recon_losses is not None:
        losses = np.asarray(recon_losses, dtype=np.float64)
        means = [losses[model.assignment == j].mean() if np.any(model.assignment == j) else -np.inf
                 for j in range(2)]
        choice = int(np.argmax(means))
    else:
        choice = 0
    log.error("tie broken towards cluster %d (higher mean reconstruction loss)", choice)
    return PathologicalSplit(model, choice, fracs, tie=True)


@dataclass(frozen=True)
class Discovery:
    background: BackgroundSplit
    pathological: PathologicalSplit
    stage_tags: np.ndarray  # one tag per input event
    labels: np.ndarray


def discover_labels(codes, recon_losses, resected_flags, annotated, keys, seed: int = 0) -> Discovery:
    """Run both stages over one event set.

    ``annotated`` marks events whose subject has a resection map; only those
    drive the stage-2 fit, the rest take the nearest stage-2 centroid.
    """
    codes = np.asarray(codes, dtype=np.float64)
    keys = np.asarray([str(k) for k in keys])
    losses = np.asarray(recon_losses, dtype=np.float64)
    flags = np.asarray(resected_flags, dtype=bool)
    annotated = np.asarray(annotated, dtype=bool)

    bg = split_background(codes, losses, keys, seed=seed)
    hfo = ~bg.is_noise
    fit = hfo & annotated
    if fit.sum() < 2:
        raise ValueError("fewer than two annotated HFO events for the pathological split")
    path = split_pathological(codes[fit], flags[fit], losses[fit], keys[fit], seed=seed)

    tags = np.full(len(codes), NOISE, dtype=object)
    cluster = path.model.predict(codes)
    tags[hfo & (cluster == path.pathological_cluster)] = PATHOLOGICAL
    tags[hfo & (cluster != path.pathological_cluster)] = PHYSIOLOGICAL
    labels = (tags == PATHOLOGICAL).astype(int)
    return Discovery(bg, path, tags, labels)


def assign_weak_labels(events: Sequence[HfoEvent], stage_tags) -> list[WeakLabel]:
    return [WeakLabel(ev, int(tag == PATHOLOGICAL), str(tag)) for ev, tag in zip(events, stage_tags)]


def write_weak_labels(path, weak: Sequence[WeakLabel]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(WEAK_LABEL_HEADER)
        for wl in sorted(weak, key=lambda x: x.event):
            e = wl.event
            w.writerow([e.subject_id, e.channel_id, repr(e.start_ms), repr(e.end_ms), wl.stage_tag, wl.l])


def read_weak_labels(path) -> dict:
    """Map event key -> (l, stage_tag)."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ev = HfoEvent(row["subject"], row["channel"], float(row["start_ms"]), float(row["end_ms"]))
            out[ev.key] = (int(row["l"]), row["stage_tag"])
    return out
