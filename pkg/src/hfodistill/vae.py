"""Morphological VAE: encoder, decoder, perceptual loss and learnable-beta pre-training."""

from __future__ import annotations

import base64
import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError

log = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
TRAIN_LOG_HEADER = ("epoch", "mean_perceptual", "mean_kl", "beta", "val_perceptual", "val_kl")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class VAEConfig:
    image_size: int = 64
    channels: tuple = (16, 32, 64, 128)
    latent_dim: int = 16
    feature_channels: tuple = (8, 16, 32)
    feature_seed: int = 7
    init_seed: int = 0

    def __post_init__(self):
        side = self.image_size / 2 ** len(self.channels)
        if side < 1 or side != int(side):
            raise ValueError(f"image_size {self.image_size} not divisible by 2**{len(self.channels)}")

    @property
    def bottleneck(self) -> int:
        return self.image_size // 2 ** len(self.channels)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "VAEConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 512
    lr: float = 1e-3
    weight_decay: float = 1e-5
    beta_init: float = 1.0
    beta_lr: float = 1e-4
    per_subject_cap: int = 2500
    perceptual_reduction: str = "sum"
    seed: int = 0


@dataclass(frozen=True)
class LatentGaussian:
    mu: torch.Tensor
    logvar: torch.Tensor


@dataclass(frozen=True)
class BetaState:
    beta: float = 1.0
    beta_lr: float = 1e-4


# --------------------------------------------------------------------------
# networks

class Encoder(torch.nn.Module):
    def __init__(self, cfg: VAEConfig, gen: torch.Generator):
        super().__init__()
        stages = []
        c_in = 1
        for c in cfg.channels:
            stages.append(torch.nn.ModuleList([T.Conv2d(c_in, c, 3, gen, stride=2, padding=1),
                                               T.ResidualBlock(c, gen)]))
            c_in = c
        self.stages = torch.nn.ModuleList(stages)
        flat = c_in * cfg.bottleneck ** 2
        self.mu_head = T.Linear(flat, cfg.latent_dim, gen)
        self.logvar_head = T.Linear(flat, cfg.latent_dim, gen)
        with torch.no_grad():
            self.logvar_head.weight.mul_(0.1)

    def forward(self, x: torch.Tensor) -> LatentGaussian:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        for down, res in self.stages:
            x = res(T.relu(down(x)))
        x = x.flatten(1)
        logvar = torch.clamp(self.logvar_head(x), LOGVAR_MIN, LOGVAR_MAX)
        return LatentGaussian(self.mu_head(x), logvar)


class Decoder(torch.nn.Module):
    def __init__(self, cfg: VAEConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        chans = list(cfg.channels[::-1])
        self.fc = T.Linear(cfg.latent_dim, chans[0] * cfg.bottleneck ** 2, gen)
        stages = []
        for i, c in enumerate(chans):
            c_out = chans[i + 1] if i + 1 < len(chans) else 1
            up = T.ConvTranspose2d(c, c_out, 4, gen, stride=2, padding=1,
                                   gain=2.0 ** 0.5 if c_out > 1 else 1.0)
            res = T.ResidualBlock(c_out, gen) if c_out > 1 else torch.nn.Identity()
            stages.append(torch.nn.ModuleList([up, res]))
        self.stages = torch.nn.ModuleList(stages)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        b = self.cfg.bottleneck
        x = T.relu(self.fc(z)).view(z.shape[0], self.cfg.channels[-1], b, b)
        n = len(self.stages)
        for i, (up, res) in enumerate(self.stages):
            x = up(x)
            if i + 1 < n:
                x = res(T.relu(x))
        return T.sigmoid(x).squeeze(1)


class FeatureExtractor(torch.nn.Module):
    """Frozen conv pyramid (stride-2 3x3 convs with tanh); every stage is a loss layer."""

    def __init__(self, channels: Sequence[int] = (8, 16, 32), seed: int = 7, in_channels: int = 1):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        c_in = in_channels
        for c in channels:
            layers.append(T.Conv2d(c_in, c, 3, gen, stride=2, padding=1, gain=1.0))
            c_in = c
        self.layers = torch.nn.ModuleList(layers)
        self.in_channels = in_channels
        self.requires_grad_(False)

    @classmethod
    def from_tensors(cls, tensors: dict) -> "FeatureExtractor":
        """Load external weights named ``layers.<i>.weight`` / ``layers.<i>.bias``."""
        n = len([k for k in tensors if k.endswith(".weight")])
        channels = [tensors[f"layers.{i}.weight"].shape[0] for i in range(n)]
        in_ch = tensors["layers.0.weight"].shape[1]
        fx = cls(channels, seed=0, in_channels=in_ch)
        fx.load_state_dict({k: torch.as_tensor(np.asarray(v, dtype=np.float64)) for k, v in tensors.items()})
        fx.requires_grad_(False)
        return fx

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if self.in_channels == 3 and x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        feats = []
        for layer in self.layers:
            x = T.tanh(layer(x))
            feats.append(x)
        return feats


class VAE(torch.nn.Module):
    def __init__(self, cfg: VAEConfig = VAEConfig()):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.init_seed)
        self.encoder = Encoder(cfg, gen)
        self.decoder = Decoder(cfg, gen)

    def encode(self, x: torch.Tensor) -> LatentGaussian:
        return self.encoder(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)


# --------------------------------------------------------------------------
# losses and beta

def reparameterize(q: LatentGaussian, gen: torch.Generator | None = None) -> torch.Tensor:
    eps = torch.randn(q.mu.shape, generator=gen, dtype=q.mu.dtype)
    return q.mu + torch.exp(0.5 * q.logvar) * eps


def kl_per_sample(q: LatentGaussian) -> torch.Tensor:
    return 0.5 * torch.sum(q.mu ** 2 + torch.exp(q.logvar) - q.logvar - 1.0, dim=-1)


def kl_divergence(q: LatentGaussian) -> torch.Tensor:
    """KL to the standard normal, summed over dimensions and averaged over the batch."""
    kl = kl_per_sample(q)
    return kl.mean() if kl.dim() else kl


def perceptual_per_sample(a: torch.Tensor, b: torch.Tensor, phi: FeatureExtractor,
                          reduction: str = "sum") -> torch.Tensor:
    """Sum over loss layers of the squared feature distance, one value per image.

    ``reduction="sum"`` uses the squared L2 norm of each feature map difference;
    ``"mean"`` divides each layer term by its element count.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    if a.dim() == 2:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    total = 0.0
    for fa, fb in zip(phi(a), phi(b)):
        d = ((fa - fb) ** 2).flatten(1)
        total = total + (d.sum(1) if reduction == "sum" else d.mean(1))
    return total


def perceptual_loss(a, b, phi, reduction: str = "sum") -> torch.Tensor:
    return perceptual_per_sample(a, b, phi, reduction).mean()


def update_beta(state: BetaState, mean_kl: float, mean_perceptual: float) -> BetaState:
    if not (math.isfinite(mean_kl) and math.isfinite(mean_perceptual)):
        raise ValueError("beta update needs finite loss means")
    beta = state.beta + state.beta_lr * (mean_kl - mean_perceptual)
    return BetaState(min(1.0, max(0.0, beta)), state.beta_lr)


def pretrain_loss(perceptual, kl, beta: float):
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta={beta} outside [0, 1]")
    return (1.0 - beta) * perceptual + beta * kl


# --------------------------------------------------------------------------
# checkpoint conversion

def _to_model(module: torch.nn.Module, tensors: dict, dtype) -> torch.nn.Module:
    state = {k: torch.as_tensor(np.asarray(v, dtype=np.float64)) for k, v in tensors.items()}
    missing = set(module.state_dict()) ^ set(state)
    if missing:
        raise CheckpointError(f"tensor names do not match architecture: {sorted(missing)[:5]}")
    module.load_state_dict(state)
    return module.to(dtype)


def _numpy_state(module: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def vae_checkpoint(vae: VAE, **header) -> Checkpoint:
    head = {"kind": "vae", "vae_config": vae.cfg.to_dict()}
    head.update(header)
    return Checkpoint(head, {"vae": _numpy_state(vae)})


def load_vae(ckpt: Checkpoint, dtype=None) -> VAE:
    cfg = VAEConfig.from_dict(ckpt.header["vae_config"])
    vae = VAE(cfg)
    _to_model(vae, ckpt.tensors("vae"), dtype or T.default_dtype())
    vae.requires_grad_(False)
    vae.eval()
    return vae


def load_features(ckpt: Checkpoint, dtype=None) -> FeatureExtractor:
    if ckpt.has("features"):
        phi = FeatureExtractor.from_tensors(ckpt.tensors("features"))
    else:
        cfg = VAEConfig.from_dict(ckpt.header["vae_config"])
        phi = FeatureExtractor(cfg.feature_channels, cfg.feature_seed)
    return phi.to(dtype or T.default_dtype())


# --------------------------------------------------------------------------
# batched inference

def _batches(n: int, size: int):
    for lo in range(0, n, size):
        yield slice(lo, min(lo + size, n))


def encode_images(vae: VAE, images: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    dtype = next(vae.parameters()).dtype
    mus, lvs = [], []
    with torch.no_grad():
        for sl in _batches(len(images), batch_size):
            q = vae.encode(torch.as_tensor(images[sl], dtype=dtype))
            mus.append(q.mu.numpy().astype(np.float64))
            lvs.append(q.logvar.numpy().astype(np.float64))
    d = vae.cfg.latent_dim
    if not mus:
        return np.zeros((0, d)), np.zeros((0, d))
    return np.concatenate(mus), np.concatenate(lvs)


def decode_codes(vae: VAE, codes: np.ndarray, batch_size: int = 256) -> np.ndarray:
    dtype = next(vae.parameters()).dtype
    out = []
    with torch.no_grad():
        for sl in _batches(len(codes), batch_size):
            out.append(vae.decode(torch.as_tensor(codes[sl], dtype=dtype)).numpy().astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, vae.cfg.image_size, vae.cfg.image_size))


def reconstruction_losses(vae: VAE, phi: FeatureExtractor, images: np.ndarray, reduction: str = "sum",
                          batch_size: int = 256) -> np.ndarray:
    """Perceptual loss between each image and the decoding of its encoder mean."""
    dtype = next(vae.parameters()).dtype
    out = []
    with torch.no_grad():
        for sl in _batches(len(images), batch_size):
            x = torch.as_tensor(images[sl], dtype=dtype)
            recon = vae.decode(vae.encode(x).mu)
            out.append(perceptual_per_sample(x, recon, phi, reduction).numpy().astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def per_event_reconstruction_loss(images: np.ndarray, ckpt: Checkpoint) -> np.ndarray:
    vae = load_vae(ckpt)
    phi = load_features(ckpt)
    return reconstruction_losses(vae, phi, images, ckpt.header.get("perceptual_reduction", "sum"))


# --------------------------------------------------------------------------
# pre-training

@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    history: list = field(default_factory=list)
    beta_trace: list = field(default_factory=list)


def sample_epoch(subject_of: np.ndarray, train_subjects, cap: int, rng: np.random.Generator) -> np.ndarray:
    """Indices for one epoch: at most ``cap`` events per training subject, shuffled."""
    chosen = []
    for sid in sorted(train_subjects):
        idx = np.flatnonzero(subject_of == sid)
        if idx.size > cap:
            idx = np.sort(rng.choice(idx, cap, replace=False))
        chosen.append(idx)
    chosen = np.concatenate(chosen) if chosen else np.zeros(0, dtype=int)
    return chosen[rng.permutation(chosen.size)]


def _encode_rng_state(np_rng: np.random.Generator, gen: torch.Generator) -> dict:
    return {"numpy": np_rng.bit_generator.state,
            "torch": base64.b64encode(gen.get_state().numpy().tobytes()).decode("ascii")}


def _write_log(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAIN_LOG_HEADER)
        for r in rows:
            w.writerow([r[k] if k == "epoch" else repr(float(r[k])) for k in TRAIN_LOG_HEADER])


def _evaluate(vae, phi, images, idx, reduction, batch_size, dtype):
    if idx.size == 0:
        return float("nan"), float("nan")
    perc, kl = 0.0, 0.0
    with torch.no_grad():
        for sl in _batches(idx.size, batch_size):
            x = torch.as_tensor(images[idx[sl]], dtype=dtype)
            q = vae.encode(x)
            perc += perceptual_per_sample(x, vae.decode(q.mu), phi, reduction).sum().item()
            kl += kl_per_sample(q).sum().item()
    return perc / idx.size, kl / idx.size


def pretrain(images: np.ndarray, subject_of: Sequence[str], train_subjects, val_subjects=(),
             vae_config: VAEConfig = VAEConfig(), config: PretrainConfig = PretrainConfig(),
             out_dir=None, features: FeatureExtractor | None = None) -> PretrainResult:
    """Train encoder and decoder with ``(1 - beta) * perceptual + beta * KL``.

    Beta is moved after every optimizer step by
    ``beta_lr * (mean KL - mean perceptual)`` of that minibatch and clamped to
    ``[0, 1]``.  With ``out_dir`` a checkpoint (``vae.ckpt``) and training log
    (``train_log.csv``) are rewritten after each completed epoch.
    """
    subject_of = np.asarray(subject_of)
    train_idx_all = np.flatnonzero(np.isin(subject_of, list(train_subjects)))
    if train_idx_all.size == 0:
        raise ValueError("empty training set")
    val_idx = np.flatnonzero(np.isin(subject_of, list(val_subjects)))

    dtype = T.default_dtype()
    vae = VAE(vae_config).to(dtype)
    phi = (features or FeatureExtractor(vae_config.feature_channels, vae_config.feature_seed)).to(dtype)
    params = list(vae.parameters())
    opt = T.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    beta = BetaState(config.beta_init, config.beta_lr)
    np_rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    red = config.perceptual_reduction
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    history, trace = [], []
    ckpt = None
    for epoch in range(1, config.epochs + 1):
        vae.train()
        order = sample_epoch(subject_of, train_subjects, config.per_subject_cap, np_rng)
        sum_perc = sum_kl = 0.0
        for sl in _batches(order.size, config.batch_size):
            x = torch.as_tensor(images[order[sl]], dtype=dtype)
            q = vae.encode(x)
            recon = vae.decode(reparameterize(q, gen))
            perc = perceptual_per_sample(x, recon, phi, red).mean()
            kl = kl_divergence(q)
            loss = pretrain_loss(perc, kl, beta.beta)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}; last good epoch {epoch - 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            p, k = perc.item(), kl.item()
            beta = update_beta(beta, k, p)
            assert 0.0 <= beta.beta <= 1.0
            trace.append(beta.beta)
            n = sl.stop - sl.start
            sum_perc += p * n
            sum_kl += k * n
        vae.eval()
        val_perc, val_kl = _evaluate(vae, phi, images, val_idx, red, 256, dtype)
        row = {"epoch": epoch, "mean_perceptual": sum_perc / order.size, "mean_kl": sum_kl / order.size,
               "beta": beta.beta, "val_perceptual": val_perc, "val_kl": val_kl}
        history.append(row)
        log.info("epoch %d perceptual %.4f kl %.4f beta %.5f val %.4f", epoch, row["mean_perceptual"],
                 row["mean_kl"], beta.beta, val_perc)
        ckpt = vae_checkpoint(vae, beta=beta.beta, beta_lr=beta.beta_lr, epoch=epoch, seed=config.seed,
                              perceptual_reduction=red, rng_state=_encode_rng_state(np_rng, gen),
                              pretrain_config=dataclasses.asdict(config))
        if features is not None:
            ckpt = ckpt.with_section("features", _numpy_state(phi))
        if out_dir is not None:
            ckpt.save(out_dir / "vae.ckpt")
            _write_log(out_dir / "train_log.csv", history)
    return PretrainResult(ckpt, history, trace)
