"""Classification head on the frozen encoder, trained on real and VAE-surrogate latents."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError
from .data import HfoEvent, stable_hash64
from .vae import VAE, _batches, encode_images, load_vae, reparameterize

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
PREDICTION_HEADER = ("subject", "channel", "start_ms", "end_ms", "probability", "label")


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 9
    batch_size: int = 4096
    lr: float = 3e-4
    weight_decay: float = 1e-5
    hidden: int = 32
    augment: bool = True
    threshold: float = 0.5
    seed: int = 0


class ClassifierHead(torch.nn.Module):
    """``latent -> hidden -> 1`` with ReLU between and a sigmoid output."""

    def __init__(self, latent_dim: int = 16, hidden: int = 32, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.fc1 = T.Linear(latent_dim, hidden, gen)
        self.fc2 = T.Linear(hidden, 1, gen)

    def forward(self, mu: torch.Tensor) -> torch.Tensor:
        return T.sigmoid(self.fc2(T.relu(self.fc1(mu)))).squeeze(-1)


def bce(p: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = torch.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))


def classifier_loss(p_real: torch.Tensor, p_surr: torch.Tensor | None, labels: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``BCE(p_real, l) + BCE(p_surr, l)``; without surrogates only the first term."""
    loss = bce(p_real, labels)
    if p_surr is not None:
        loss = loss + bce(p_surr, labels)
    return loss.mean()


def embed(vae: VAE, images: np.ndarray) -> np.ndarray:
    return encode_images(vae, images)[0]


def surrogate_noise(keys: Sequence[str], epoch: int, latent_dim: int, seed: int) -> np.ndarray:
    """Standard-normal draws from a substream per (seed, event, epoch)."""
    out = np.empty((len(keys), latent_dim))
    for i, k in enumerate(keys):
        out[i] = np.random.default_rng([seed, stable_hash64(k), epoch]).standard_normal(latent_dim)
    return out


def make_surrogates(vae: VAE, mu: np.ndarray, logvar: np.ndarray, eps: np.ndarray,
                    batch_size: int = 256) -> np.ndarray:
    """Decode ``mu + exp(logvar / 2) * eps``; returns surrogate images."""
    dtype = next(vae.parameters()).dtype
    out = []
    with torch.no_grad():
        for sl in _batches(len(mu), batch_size):
            z = torch.as_tensor(mu[sl], dtype=dtype) + torch.exp(
                0.5 * torch.as_tensor(logvar[sl], dtype=dtype)) * torch.as_tensor(eps[sl], dtype=dtype)
            out.append(vae.decode(z).numpy())
    return np.concatenate(out) if out else np.zeros((0, vae.cfg.image_size, vae.cfg.image_size))


def make_surrogate(vae: VAE, image: np.ndarray, gen: torch.Generator | None = None) -> np.ndarray:
    """One surrogate of one image: ``decode(reparameterize(encode(image)))``."""
    dtype = next(vae.parameters()).dtype
    with torch.no_grad():
        q = vae.encode(torch.as_tensor(image[None], dtype=dtype))
        return vae.decode(reparameterize(q, gen))[0].numpy()


@dataclass
class ClassifierResult:
    head: ClassifierHead
    checkpoint: Checkpoint
    history: list = field(default_factory=list)


def train_classifier(images: np.ndarray, labels: Sequence[int], keys: Sequence[str], ckpt: Checkpoint,
                     config: ClassifierConfig = ClassifierConfig()) -> ClassifierResult:
    """Fit the head on weak labels with the VAE frozen.

    Each epoch draws one fresh surrogate per event; the surrogate is treated
    as data.  Returns the head and ``ckpt`` extended with a ``classifier``
    section.
    """
    labels = np.asarray(labels, dtype=np.float64)
    keys = [str(k) for k in keys]
    if len(labels) == 0:
        raise ValueError("empty training set")
    if not (len(labels) == len(keys) == len(images)):
        raise ValueError("images, labels and keys differ in length")
    vae_hash = ckpt.section_hash("vae")
    dtype = T.default_dtype()
    vae = load_vae(ckpt, dtype)
    d = vae.cfg.latent_dim
    mu, logvar = encode_images(vae, images)
    head = ClassifierHead(d, config.hidden, config.seed).to(dtype)
    opt = T.Adam(head.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    y_all = torch.as_tensor(labels, dtype=dtype)
    mu_t = torch.as_tensor(mu, dtype=dtype)

    history = []
    for epoch in range(config.epochs):
        if config.augment:
            eps = surrogate_noise(keys, epoch, d, config.seed)
            surr = make_surrogates(vae, mu, logvar, eps)
            mu_hat = torch.as_tensor(embed(vae, surr), dtype=dtype)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(labels))
        total = 0.0
        for sl in _batches(len(order), config.batch_size):
            idx = torch.as_tensor(order[sl])
            p_real = head(mu_t[idx])
            p_surr = head(mu_hat[idx]) if config.augment else None
            loss = classifier_loss(p_real, p_surr, y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / len(order))
        log.info("classifier epoch %d loss %.5f", epoch + 1, history[-1])

    if ckpt.section_hash("vae") != vae_hash:
        raise RuntimeError("VAE parameters changed during classifier training")
    state = {k: v.detach().numpy().astype(np.float32) for k, v in head.state_dict().items()}
    out = ckpt.with_section("classifier", state, classifier_config=dataclasses.asdict(config),
                            classifier_history=history)
    return ClassifierResult(head, out, history)


def load_head(ckpt: Checkpoint, dtype=None) -> ClassifierHead:
    cfg = ckpt.header.get("classifier_config")
    if cfg is None or not ckpt.has("classifier"):
        raise CheckpointError("checkpoint has no trained classifier")
    tensors = ckpt.tensors("classifier")
    latent_dim = tensors["fc1.weight"].shape[1]
    head = ClassifierHead(latent_dim, cfg["hidden"], cfg["seed"])
    head.load_state_dict({k: torch.as_tensor(np.asarray(v, dtype=np.float64)) for k, v in tensors.items()})
    head.requires_grad_(False)
    return head.to(dtype or T.default_dtype())


def predict_proba(head: ClassifierHead, mu: np.ndarray) -> np.ndarray:
    dtype = next(head.parameters()).dtype
    with torch.no_grad():
        return head(torch.as_tensor(mu, dtype=dtype)).numpy().astype(np.float64)


def predict(images: np.ndarray, ckpt: Checkpoint, threshold: float | None = None):
    """Probabilities and hard labels (``probability > threshold``) from encoder means."""
    vae = load_vae(ckpt)
    head = load_head(ckpt)
    if threshold is None:
        threshold = ckpt.header["classifier_config"]["threshold"]
    probs = predict_proba(head, embed(vae, images))
    return probs, (probs > threshold).astype(int)


def write_predictions(path, events: Sequence[HfoEvent], probs, labels) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted(zip(events, probs, labels), key=lambda r: r[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_HEADER)
        for e, p, lab in rows:
            w.writerow([e.subject_id, e.channel_id, repr(e.start_ms), repr(e.end_ms), repr(float(p)), int(lab)])


def read_predictions(path) -> dict:
    """Map event key -> (probability, label)."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ev = HfoEvent(row["subject"], row["channel"], float(row["start_ms"]), float(row["end_ms"]))
            out[ev.key] = (float(row["probability"]), int(row["label"]))
    return out
