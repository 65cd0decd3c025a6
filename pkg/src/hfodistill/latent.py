"""Latent-space diagnostics: per-dimension interpolation sweeps, knockout and PCA mixing."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .checkpoint import Checkpoint
from .tf import write_pgm
from .vae import decode_codes, load_vae

log = logging.getLogger(__name__)

MIXING_K = 10


def percentile(values, q: float) -> float:
    """Linear-interpolation quantile of ``values`` at fraction ``q``."""
    a = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if a.size == 0:
        raise ValueError("percentile of empty input")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    pos = q * (a.size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, a.size - 1)
    frac = pos - lo
    return float(a[lo] + frac * (a[hi] - a[lo]))


@dataclass(frozen=True)
class SweepSpec:
    seed_code: np.ndarray
    dim: int
    steps: int = 8
    lo_q: float = 0.001
    hi_q: float = 0.999

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("steps must be at least 2")
        if not 0.0 <= self.lo_q < self.hi_q <= 1.0:
            raise ValueError("need 0 <= lo_q < hi_q <= 1")
        if not 0 <= self.dim < len(self.seed_code):
            raise ValueError(f"dim {self.dim} outside latent of size {len(self.seed_code)}")


def seed_code(codes, labels) -> np.ndarray:
    """Mean latent code of predicted-pathological events."""
    codes = np.asarray(codes, dtype=np.float64)
    mask = np.asarray(labels).astype(bool)
    if not mask.any():
        raise ValueError("no predicted-pathological events; sweep seed undefined")
    return codes[mask].mean(axis=0)


def sweep_values(spec: SweepSpec, all_codes) -> np.ndarray:
    column = np.asarray(all_codes, dtype=np.float64)[:, spec.dim]
    return np.linspace(percentile(column, spec.lo_q), percentile(column, spec.hi_q), spec.steps)


def sweep_codes(spec: SweepSpec, all_codes) -> np.ndarray:
    codes = np.tile(np.asarray(spec.seed_code, dtype=np.float64), (spec.steps, 1))
    codes[:, spec.dim] = sweep_values(spec, all_codes)
    return codes


def interpolate_dimension(spec: SweepSpec, all_codes, ckpt: Checkpoint) -> np.ndarray:
    """Decoded images, in order, for the seed with ``dim`` swept between the percentile bounds."""
    return decode_codes(load_vae(ckpt), sweep_codes(spec, all_codes))


def knockout(codes, dim: int) -> np.ndarray:
    """Copy of ``codes`` with coordinate ``dim`` set to zero."""
    out = np.array(codes, dtype=np.float64, copy=True)
    if not -out.shape[1] <= dim < out.shape[1]:
        raise ValueError(f"dim {dim} outside latent of size {out.shape[1]}")
    out[:, dim] = 0.0
    return out


@dataclass(frozen=True)
class PCAResult:
    components: np.ndarray  # (2, d)
    projected: np.ndarray  # (n, 2)
    explained: np.ndarray  # variance fraction per component
    mean: np.ndarray


def pca2(points) -> PCAResult:
    """Top two principal axes of the centred cloud.

    Each axis is signed so its largest-magnitude entry is positive.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 2:
        raise ValueError("pca2 needs at least 3 points of dimension >= 2")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    total = float(evals.clip(min=0).sum())
    if total <= 0:
        raise ValueError("all points identical; PCA undefined")
    order = np.argsort(evals)[::-1][:2]
    comps = evecs[:, order].T
    for i in range(2):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return PCAResult(comps, xc @ comps.T, np.clip(evals[order], 0, None) / total, mean)


def mixing_score(points2d, labels, k: int = MIXING_K) -> float:
    """Share of k-nearest-neighbour pairs whose predicted labels differ."""
    p = np.asarray(points2d, dtype=np.float64)
    y = np.asarray(labels)
    n = len(p)
    if n < 2:
        return 0.0
    k = min(k, n - 1)
    _, idx = cKDTree(p).query(p, k=k + 1)
    # drop each point's self match (duplicates may displace it)
    nn = np.array([[j for j in row if j != i][:k] for i, row in enumerate(idx)])
    return float(np.mean(y[nn] != y[:, None]))


def knockout_analysis(codes, probs, labels, dim: int, k: int = MIXING_K):
    """PCA refit on knocked-out codes; returns the projection and its mixing score."""
    pca = pca2(knockout(codes, dim))
    return pca, mixing_score(pca.projected, labels, k)


# --------------------------------------------------------------------------
# rendering

def tile_row(images: Sequence[np.ndarray], gap: int = 2) -> np.ndarray:
    h, w = images[0].shape
    out = np.ones((h, len(images) * w + gap * (len(images) - 1)))
    for i, img in enumerate(images):
        out[:, i * (w + gap): i * (w + gap) + w] = np.clip(img, 0.0, 1.0)
    return out


def render_sweeps(out_dir, sweeps: dict) -> list[Path]:
    """One PGM strip per dimension: ``sweeps/dim_<i>.pgm``."""
    paths = []
    for dim, images in sorted(sweeps.items()):
        path = Path(out_dir) / "sweeps" / f"dim_{dim}.pgm"
        write_pgm(path, tile_row(list(images)))
        paths.append(path)
    return paths


def render_knockout(out_dir, event_ids: Sequence[str], results: dict, probs, labels) -> list[Path]:
    """``knockout/dim_<i>.csv`` per dimension plus ``knockout/summary.csv``.

    ``results`` maps dimension -> (PCAResult, mixing score).
    """
    base = Path(out_dir) / "knockout"
    base.mkdir(parents=True, exist_ok=True)
    paths = []
    for dim, (pca, _) in sorted(results.items()):
        path = base / f"dim_{dim}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["event_id", "pc1", "pc2", "probability", "label"])
            for eid, (a, b), p, lab in zip(event_ids, pca.projected, probs, labels):
                w.writerow([eid, repr(float(a)), repr(float(b)), repr(float(p)), int(lab)])
        paths.append(path)
    summary = base / "summary.csv"
    with open(summary, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dimension", "mixing_score"])
        for dim, (_, score) in sorted(results.items()):
            w.writerow([dim, repr(float(score))])
    paths.append(summary)
    return paths
