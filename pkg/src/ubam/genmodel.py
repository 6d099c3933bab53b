"""Disentangling variational encoder-decoder.

The posture branch is a trainable linear head over the frozen posture
features from the surrogate-trained trunk; the appearance branch is a
5-stage conv encoder. Both produce a 50-dim mean and 50-dim std. The
decoder consumes the concatenated samples and is trained on

    total = reconstruction + gamma * appearance-consistency + eta * KL

with gamma = eta = 1e-3 by default. Reconstruction distance is either
plain pixel MSE or pixel MSE plus multi-scale fixed random conv features
(self-contained stand-in for a pretrained perceptual net).
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import dataio, reprnet
from .errors import ConfigError, ContractViolation, DomainError, NumericalFailure, MissingArtifactError

log = logging.getLogger(__name__)

LATENT_DIM = 50  # per branch: 50 mean + 50 std


@dataclass
class LatentGaussian:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape:
            raise DomainError("mu and sigma must have the same shape")
        if np.any(self.sigma <= 0):
            raise DomainError("sigma must be strictly positive")


@dataclass
class VaeConfig:
    input_size: int = 64
    latent_dim: int = LATENT_DIM
    gamma: float = 1e-3          # appearance-consistency weight
    eta: float = 1e-3            # KL weight
    learning_rate: float = 5e-4
    epochs: int = 50
    batch_size: int = 32
    perceptual_mode: str = "fixed_random_features"  # or "pixel_l2"
    appearance_channels: tuple = (16, 32, 48, 64, 64)
    decoder_channels: tuple = (128, 96, 64, 48, 32)
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0 or self.eta < 0:
            raise DomainError("gamma and eta must be >= 0")
        if self.perceptual_mode not in ("pixel_l2", "fixed_random_features"):
            raise DomainError(f"unknown perceptual mode {self.perceptual_mode!r}")


class AppearanceEncoder(nn.Module):
    """Five stride-2 conv stages with batch norm and leaky rectification."""

    def __init__(self, cfg: VaeConfig):
        super().__init__()
        layers = []
        prev = 3
        for ch in cfg.appearance_channels:
            layers += [nn.Conv2d(prev, ch, kernel_size=4, stride=2, padding=1),
                       nn.BatchNorm2d(ch), nn.LeakyReLU(0.2)]
            prev = ch
        self.features = nn.Sequential(*layers)
        side = cfg.input_size // 2 ** len(cfg.appearance_channels)
        flat = cfg.appearance_channels[-1] * side * side
        self.fc_mu = nn.Linear(flat, cfg.latent_dim)
        self.fc_logvar = nn.Linear(flat, cfg.latent_dim)

    def forward(self, x):
        h = self.features(x).flatten(1)
        return self.fc_mu(h), self.fc_logvar(h)


class PostureHead(nn.Module):
    """Trainable linear maps from frozen posture features to (mu, logvar)."""

    def __init__(self, posture_dim: int, latent_dim: int):
        super().__init__()
        self.fc_mu = nn.Linear(posture_dim, latent_dim)
        self.fc_logvar = nn.Linear(posture_dim, latent_dim)

    def forward(self, f_pi):
        return self.fc_mu(f_pi), self.fc_logvar(f_pi)


class Decoder(nn.Module):
    """FC stage over the concatenated latents, then 5 upsample-conv stages."""

    def __init__(self, cfg: VaeConfig):
        super().__init__()
        ch = cfg.decoder_channels
        self.start = cfg.input_size // 2 ** len(ch)
        self.c0 = ch[0]
        self.fc = nn.Linear(2 * cfg.latent_dim, ch[0] * self.start * self.start)
        stages = []
        prev = ch[0]
        for c in ch[1:]:
            stages += [nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(prev, c, kernel_size=3, padding=1),
                       nn.BatchNorm2d(c), nn.LeakyReLU(0.2)]
            prev = c
        stages += [nn.Upsample(scale_factor=2, mode="nearest"),
                   nn.Conv2d(prev, 3, kernel_size=3, padding=1)]
        self.stages = nn.Sequential(*stages)

    def forward(self, z_pi, z_alpha):
        z = torch.cat([z_pi, z_alpha], dim=1)
        h = F.relu(self.fc(z)).reshape(-1, self.c0, self.start, self.start)
        return torch.sigmoid(self.stages(h))


class RandomFeatureDistance(nn.Module):
    """Multi-scale fixed random conv features plus a pixel term.

    Weights are seeded and never trained; a cheap, self-contained proxy
    for a pretrained perceptual feature net.
    """

    def __init__(self, seed: int = 0, channels: int = 16):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        convs = []
        for _ in range(3):
            w = torch.randn((channels, 3, 3, 3), generator=g) / math.sqrt(27)
            convs.append(w)
        self.weights = nn.ParameterList(
            [nn.Parameter(w, requires_grad=False) for w in convs])

    def forward(self, a, b):
        d = F.mse_loss(a, b)
        xa, xb = a, b
        for w in self.weights:
            fa, fb = F.conv2d(xa, w, padding=1), F.conv2d(xb, w, padding=1)
            d = d + F.mse_loss(fa, fb)
            xa = F.avg_pool2d(xa, 2)
            xb = F.avg_pool2d(xb, 2)
        return d


class DisentanglingVae(nn.Module):
    def __init__(self, cfg: VaeConfig, trunk: reprnet.FrameTrunk,
                 trunk_sha256: str | None = None):
        super().__init__()
        self.cfg = cfg
        self.trunk = trunk
        self.trunk_sha256 = trunk_sha256 or reprnet.state_dict_sha256(trunk)
        for p in self.trunk.parameters():  # gradients never reach F_pi
            p.requires_grad_(False)
        self.posture_head = PostureHead(trunk.fc6.out_features, cfg.latent_dim)
        self.appearance = AppearanceEncoder(cfg)
        self.decoder = Decoder(cfg)
        self.perceptual = (RandomFeatureDistance(cfg.seed)
                           if cfg.perceptual_mode == "fixed_random_features" else None)

    def trainable_modules(self):
        return [self.posture_head, self.appearance, self.decoder]

    def posture_params(self, x):
        """(mu, logvar) of the posture latent; F_pi stays frozen."""
        self.trunk.eval()
        with torch.no_grad():
            f_pi, _ = self.trunk(x)
        return self.posture_head(f_pi)

    def appearance_params(self, x):
        return self.appearance(x)

    def rec_distance(self, a, b):
        if self.perceptual is None:
            return F.mse_loss(a, b)
        return self.perceptual(a, b)


def _check_frame(vae: DisentanglingVae, x: torch.Tensor) -> torch.Tensor:
    s = vae.cfg.input_size
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.shape[-3:] != (3, s, s):
        raise DomainError(f"expected (3, {s}, {s}) frames, got {tuple(x.shape)}")
    return x


def encode_posture(vae: DisentanglingVae, frame: torch.Tensor) -> LatentGaussian:
    x = _check_frame(vae, frame)
    vae.eval()
    with torch.no_grad():
        mu, logvar = vae.posture_params(x)
    return LatentGaussian(mu[0].numpy(), np.exp(0.5 * logvar[0].numpy()))


def encode_appearance(vae: DisentanglingVae, frame: torch.Tensor) -> LatentGaussian:
    x = _check_frame(vae, frame)
    vae.eval()
    with torch.no_grad():
        mu, logvar = vae.appearance_params(x)
    return LatentGaussian(mu[0].numpy(), np.exp(0.5 * logvar[0].numpy()))


def reparameterize(g: LatentGaussian, rng: np.random.Generator | None = None,
                   mode: str = "sample") -> np.ndarray:
    """z = mu + sigma * eps in training mode; z = mu at inference."""
    if mode == "mean" or rng is None:
        return g.mu.copy()
    eps = rng.standard_normal(g.mu.shape)
    return g.mu + g.sigma * eps


def decode(vae: DisentanglingVae, z_pi, z_alpha) -> np.ndarray:
    """Deterministic image in [0, 1] from a (z_pi, z_alpha) pair."""
    z_pi = np.atleast_2d(np.asarray(z_pi, dtype=np.float32))
    z_alpha = np.atleast_2d(np.asarray(z_alpha, dtype=np.float32))
    d = vae.cfg.latent_dim
    if z_pi.shape[1] != d or z_alpha.shape[1] != d:
        raise DomainError(f"latents must have dim {d}")
    vae.eval()
    with torch.no_grad():
        img = vae.decoder(torch.from_numpy(z_pi), torch.from_numpy(z_alpha))
    out = img.permute(0, 2, 3, 1).numpy().astype(np.float64)
    return out[0] if out.shape[0] == 1 else out


def reconstruct(vae: DisentanglingVae, frame: torch.Tensor) -> np.ndarray:
    """Mean-latent reconstruction D(E_pi(x), E_alpha(x))."""
    zp = encode_posture(vae, frame).mu
    za = encode_appearance(vae, frame).mu
    return decode(vae, zp, za)


# ---------------------------------------------------------------------------
# loss terms (numpy contracts; torch versions used in training)


def loss_rec(vae: DisentanglingVae, x, x_prime) -> float:
    a = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    b = torch.as_tensor(np.asarray(x_prime), dtype=torch.float32)
    if a.shape != b.shape:
        raise DomainError("shapes must match")
    if a.ndim == 3:  # HWC -> NCHW
        a = a.permute(2, 0, 1).unsqueeze(0)
        b = b.permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        return float(vae.rec_distance(a, b))


def loss_app(mu_i: np.ndarray, mu_j: np.ndarray) -> float:
    """Squared Euclidean distance between appearance mean vectors."""
    mu_i = np.asarray(mu_i, dtype=np.float64)
    mu_j = np.asarray(mu_j, dtype=np.float64)
    return float(np.sum((mu_i - mu_j) ** 2))


def loss_kl(g: LatentGaussian) -> float:
    """KL(N(mu, sigma^2) || N(0, I)) = 0.5 * sum(mu^2 + s^2 - 1 - ln s^2)."""
    s2 = g.sigma ** 2
    return float(0.5 * np.sum(g.mu ** 2 + s2 - 1.0 - np.log(s2)))


def _kl_torch(mu, logvar):
    return 0.5 * torch.sum(mu ** 2 + torch.exp(logvar) - 1.0 - logvar, dim=1)


def vae_loss_terms(vae: DisentanglingVae, x, x_pair, eps_pi=None, eps_alpha=None):
    """Per-batch loss terms as torch scalars.

    `x_pair` holds a second frame from the same video per batch element.
    Optional fixed noise tensors make the loss a deterministic function
    of the parameters (used by gradient checks).
    """
    self_dtype = next(vae.decoder.parameters()).dtype
    x = x.to(self_dtype)
    x_pair = x_pair.to(self_dtype)
    vae.trunk.eval()
    with torch.no_grad():
        f_pi, _ = vae.trunk(x)
    mu_pi, logvar_pi = vae.posture_head(f_pi)
    mu_a, logvar_a = vae.appearance(x)
    mu_a2, _ = vae.appearance(x_pair)

    if eps_pi is None:
        eps_pi = torch.randn_like(mu_pi)
    if eps_alpha is None:
        eps_alpha = torch.randn_like(mu_a)
    z_pi = mu_pi + torch.exp(0.5 * logvar_pi) * eps_pi
    z_a = mu_a + torch.exp(0.5 * logvar_a) * eps_alpha
    x_rec = vae.decoder(z_pi, z_a)

    rec = vae.rec_distance(x_rec, x)
    app = torch.mean(torch.sum((mu_a - mu_a2) ** 2, dim=1))
    kl = torch.mean(_kl_torch(mu_pi, logvar_pi) + _kl_torch(mu_a, logvar_a))
    total = rec + vae.cfg.gamma * app + vae.cfg.eta * kl
    return {"total": total, "rec": rec, "app": app, "kl": kl}


# ---------------------------------------------------------------------------
# training


def train_vae(config: VaeConfig, manifest: dataio.CorpusManifest,
              repr_model: reprnet.SurrogateModel,
              store: reprnet.FrameStore | None = None,
              split: str = "train"):
    """Train the VAE against a frozen surrogate trunk; returns (vae, log)."""
    if repr_model.cfg.input_size != config.input_size:
        raise ConfigError("VAE input size must match the posture trunk input size")
    torch.manual_seed(config.seed)
    store = store or reprnet.FrameStore(manifest, config.input_size)
    vae = DisentanglingVae(config, repr_model.trunk)
    frozen_sha = reprnet.state_dict_sha256(vae.trunk)
    params = [p for m in vae.trainable_modules() for p in m.parameters()]
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)

    videos = manifest.videos_in_split(split) if split else manifest.videos
    if not videos:
        raise DomainError(f"no videos in split {split!r}")
    items = [(v["video_id"], i) for v in videos for i in range(v["n_frames"])]
    frames_per_video = {v["video_id"]: v["n_frames"] for v in videos}

    history = []
    for epoch in range(config.epochs):
        vae.train()
        vae.trunk.eval()
        order = rng.permutation(len(items))
        ep = {"total": [], "rec": [], "app": [], "kl": []}
        for i in range(0, len(order) - len(order) % config.batch_size, config.batch_size):
            chunk = [items[j] for j in order[i:i + config.batch_size]]
            # uniform random partner frame from the same video
            pairs = [(vid, int(rng.integers(frames_per_video[vid]))) for vid, _ in chunk]
            x = torch.stack([store.frames(vid, [fi])[0] for vid, fi in chunk])
            xp = torch.stack([store.frames(vid, [fi])[0] for vid, fi in pairs])
            terms = vae_loss_terms(vae, x, xp)
            if not torch.isfinite(terms["total"]):
                raise NumericalFailure(f"VAE loss diverged at epoch {epoch}")
            opt.zero_grad()
            terms["total"].backward()
            opt.step()
            for k in ep:
                ep[k].append(float(terms[k]))
        history.append({"epoch": epoch, **{k: float(np.mean(v)) for k, v in ep.items()}})
        log.info("vae epoch %d: total=%.5f rec=%.5f app=%.5f kl=%.3f",
                 epoch, history[-1]["total"], history[-1]["rec"],
                 history[-1]["app"], history[-1]["kl"])

    if reprnet.state_dict_sha256(vae.trunk) != frozen_sha:
        raise ContractViolation("frozen posture trunk was modified during VAE training")
    vae.eval()
    return vae, {"history": history, "trunk_sha256": frozen_sha}


def save_vae_checkpoint(vae: DisentanglingVae, log_dict: dict, path):
    payload = {"kind": "vae", "config": asdict(vae.cfg),
               "state_dict": vae.state_dict(),
               "trunk_sha256": vae.trunk_sha256, "log": log_dict}
    torch.save(payload, path)


def load_vae_checkpoint(path, repr_model: reprnet.SurrogateModel):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint {path} not found")
    payload = torch.load(path, weights_only=False)
    trunk_sha = reprnet.state_dict_sha256(repr_model.trunk)
    if payload["trunk_sha256"] != trunk_sha:
        raise ConfigError("VAE checkpoint was trained against a different posture trunk")
    cfg_d = dict(payload["config"])
    for key in ("appearance_channels", "decoder_channels"):
        cfg_d[key] = tuple(cfg_d[key])
    vae = DisentanglingVae(VaeConfig(**cfg_d), repr_model.trunk, trunk_sha)
    vae.load_state_dict(payload["state_dict"])
    vae.eval()
    return vae, payload
