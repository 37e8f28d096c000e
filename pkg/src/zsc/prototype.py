"""Conditional VAE feature generator and class prototypes."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import VAEConfig
from .embedding import SemanticEmbedding

log = logging.getLogger(__name__)


class ConditionalVAE(nn.Module):
    """Two-layer FC encoder and decoder, both conditioned by concatenating ``a``."""

    def __init__(self, x_dim: int, sem_dim: int, latent_dim: int = 64, hidden: int = 256,
                 output_activation: str = "relu"):
        super().__init__()
        if output_activation not in ("relu", "none"):
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.x_dim, self.sem_dim, self.latent_dim, self.hidden = x_dim, sem_dim, latent_dim, hidden
        self.output_activation = output_activation
        self.enc1 = nn.Linear(x_dim + sem_dim, hidden)
        self.enc2 = nn.Linear(hidden, 2 * latent_dim)
        self.dec1 = nn.Linear(latent_dim + sem_dim, hidden)
        self.dec2 = nn.Linear(hidden, x_dim)

    def arch(self) -> dict:
        return {"x_dim": self.x_dim, "sem_dim": self.sem_dim, "latent_dim": self.latent_dim,
                "hidden": self.hidden, "output_activation": self.output_activation}

    def encode(self, x: torch.Tensor, a: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = F.leaky_relu(self.enc1(torch.cat([x, a], dim=-1)), 0.2)
        mu, logvar = self.enc2(h).chunk(2, dim=-1)
        return mu, logvar

    def decode(self, z: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.dec1(torch.cat([z, a], dim=-1)), 0.2)
        out = self.dec2(h)
        return F.relu(out) if self.output_activation == "relu" else out


def gaussian_kl(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)), summed over the last axis."""
    # exp(v) - 1 - v >= 0 mathematically; expm1 and the clamp keep it so near v = 0
    return 0.5 * ((torch.expm1(logvar) - logvar).clamp_min(0.0) + mu**2).sum(dim=-1)


def _as_tensor(v, dtype) -> torch.Tensor:
    if isinstance(v, SemanticEmbedding):
        v = v.vector
    if isinstance(v, torch.Tensor):
        return v.to(dtype)
    return torch.as_tensor(np.asarray(v), dtype=dtype)


def vae_loss(vae: ConditionalVAE, x, a, eps: torch.Tensor | None = None,
             generator: torch.Generator | None = None):
    """Return ``(kl, recon, total)``, averaged over a leading batch axis if present.

    ``recon`` is the summed squared error of one reparameterized sample; pass
    ``eps`` to fix that sample.
    """
    dtype = next(vae.parameters()).dtype
    x, a = _as_tensor(x, dtype), _as_tensor(a, dtype)
    if x.shape[-1] != vae.x_dim or a.shape[-1] != vae.sem_dim:
        raise ValueError(f"expected x dim {vae.x_dim} and a dim {vae.sem_dim}, "
                         f"got {x.shape[-1]} and {a.shape[-1]}")
    mu, logvar = vae.encode(x, a)
    if eps is None:
        eps = torch.randn(mu.shape, generator=generator, dtype=dtype)
    z = mu + (0.5 * logvar).exp() * eps
    recon = ((vae.decode(z, a) - x) ** 2).sum(dim=-1)
    kl = gaussian_kl(mu, logvar)
    if kl.ndim:
        kl, recon = kl.mean(), recon.mean()
    return kl, recon, kl + recon


@dataclass
class VAETrainLog:
    epoch_losses: list[float] = field(default_factory=list)


def train_vae(x: np.ndarray, a: np.ndarray, cfg: VAEConfig, output_activation: str = "relu"
              ) -> tuple[ConditionalVAE, VAETrainLog]:
    """Fit a CVAE to features ``x`` (N, x_dim) paired with semantic vectors ``a`` (N, sem_dim)."""
    x, a = np.asarray(x), np.asarray(a)
    if len(x) == 0:
        raise ValueError("empty feature set")
    if len(x) != len(a):
        raise ValueError("features and semantic vectors differ in length")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    vae = ConditionalVAE(x.shape[1], a.shape[1], cfg.latent_dim, cfg.hidden, output_activation)
    xt, at = torch.from_numpy(x).float(), torch.from_numpy(a).float()
    opt = torch.optim.Adam(vae.parameters(), lr=cfg.lr)
    trainlog = VAETrainLog()
    for epoch in range(cfg.epochs):
        order = torch.from_numpy(rng.permutation(len(x)))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, _, loss = vae_loss(vae, xt[idx], at[idx], generator=gen)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        trainlog.epoch_losses.append(total / len(x))
        log.debug("vae epoch %d loss %.4f", epoch, total / len(x))
    log.info("vae loss %.4f -> %.4f", trainlog.epoch_losses[0], trainlog.epoch_losses[-1])
    vae.eval()
    return vae, trainlog


@dataclass
class ClassPrototype:
    class_name: str
    vector: np.ndarray
    n_samples: int
    seed: int

    def to_json(self) -> str:
        return json.dumps({"class_name": self.class_name, "vector": self.vector.tolist(),
                           "n_samples": self.n_samples, "seed": self.seed})

    @classmethod
    def from_json(cls, text: str) -> "ClassPrototype":
        d = json.loads(text)
        return cls(d["class_name"], np.asarray(d["vector"], dtype=np.float64), d["n_samples"],
                   d["seed"])


@torch.no_grad()
def generate_features(vae: nn.Module, a, n_samples: int, seed: int) -> np.ndarray:
    """Decode ``n_samples`` latent draws z ~ N(0, I) with condition ``a``, in float64."""
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    vae64 = copy.deepcopy(vae).double().eval()
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn((n_samples, vae.latent_dim), generator=gen, dtype=torch.float64)
    a = _as_tensor(a, torch.float64).expand(n_samples, -1)
    return vae64.decode(z, a).numpy()


def generate_class_prototype(vae: nn.Module, a: SemanticEmbedding, n_samples: int = 256,
                             seed: int = 0) -> ClassPrototype:
    feats = generate_features(vae, a, n_samples, seed)
    return ClassPrototype(a.class_name, feats.mean(axis=0), n_samples, seed)
