"""Patch-embedding space for class-relevant selection, and semantic class embeddings.

The patch space is the penultimate layer of a small classifier trained on
object crops from training classes (plus a background class). It plays the
part of pretrained ImageNet features and shares nothing with the counter.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .config import EmbedConfig, SemanticConfig
from .crops import crop_resize, to_tensor
from .data import BoundingBox, DataError, ImageRecord

log = logging.getLogger(__name__)

BACKGROUND = "__background__"


class EmbeddingNetwork(nn.Module):
    def __init__(self, class_names: Sequence[str], embedding_dim: int = 64, patch_size: int = 32,
                 widths: Sequence[int] = (16, 32, 64, 64)):
        super().__init__()
        self.class_names = list(class_names)
        self.embedding_dim = embedding_dim
        self.patch_size = patch_size
        self.widths = tuple(widths)
        layers, c = [], 3
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            c = w
        self.features = nn.Sequential(*layers)
        side = patch_size // 2 ** len(widths)
        if side < 1:
            raise ValueError("patch_size too small for the number of conv blocks")
        self.embed_layer = nn.Sequential(nn.Flatten(), nn.Linear(c * side * side, embedding_dim),
                                         nn.ReLU())
        self.classifier = nn.Linear(embedding_dim, len(self.class_names))

    def embed(self, crops: torch.Tensor) -> torch.Tensor:
        return self.embed_layer(self.features(crops))

    def forward(self, crops: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.embed(crops))

    def arch(self) -> dict:
        return {"class_names": self.class_names, "embedding_dim": self.embedding_dim,
                "patch_size": self.patch_size, "widths": list(self.widths)}


@torch.no_grad()
def embed_patches(net: EmbeddingNetwork, image: np.ndarray | torch.Tensor,
                  boxes: Sequence[BoundingBox], batch_size: int = 256) -> np.ndarray:
    """Embeddings (len(boxes), embedding_dim) of crops resized to the net's patch size."""
    dtype = next(net.parameters()).dtype
    img = to_tensor(image, dtype) if isinstance(image, np.ndarray) else image.to(dtype)
    net.eval()
    chunks = [net.embed(crop_resize(img, boxes[i:i + batch_size], net.patch_size))
              for i in range(0, len(boxes), batch_size)]
    if not chunks:
        return np.zeros((0, net.embedding_dim))
    return torch.cat(chunks).double().numpy()


def embed_patch(net: EmbeddingNetwork, image, box: BoundingBox) -> np.ndarray:
    return embed_patches(net, image, [box])[0]


def _jitter(box: BoundingBox, h: int, w: int, rng: np.random.Generator) -> BoundingBox:
    cx, cy = box.center
    scale = rng.uniform(0.9, 1.6)
    bw, bh = box.width * scale, box.height * scale
    cx += rng.uniform(-0.15, 0.15) * box.width
    cy += rng.uniform(-0.15, 0.15) * box.height
    x1 = int(np.clip(round(cx - bw / 2), 0, w - 2))
    y1 = int(np.clip(round(cy - bh / 2), 0, h - 2))
    x2 = int(np.clip(round(cx + bw / 2), x1 + 2, w))
    y2 = int(np.clip(round(cy + bh / 2), y1 + 2, h))
    return BoundingBox(x1, y1, x2, y2)


def _background_box(r: ImageRecord, rng: np.random.Generator) -> BoundingBox | None:
    occupied = r.instance_boxes + [b for _, b in r.distractors]
    for _ in range(30):
        side = int(rng.integers(12, 33))
        if side >= min(r.height, r.width):
            return None
        x1 = int(rng.integers(0, r.width - side + 1))
        y1 = int(rng.integers(0, r.height - side + 1))
        b = BoundingBox(x1, y1, x1 + side, y1 + side)
        if not any(o.contains(*b.center) for o in occupied):
            return b
    return None


@dataclass
class EmbeddingTrainLog:
    losses: list[float] = field(default_factory=list)
    train_accuracy: float = 0.0
    heldout_accuracy: float = 0.0


def train_embedding_network(records: Sequence[ImageRecord], cfg: EmbedConfig
                            ) -> tuple[EmbeddingNetwork, EmbeddingTrainLog]:
    """Cross-entropy training on jittered object crops from the training split."""
    if not records:
        raise DataError("empty training split")
    samples = []  # (record index, box, class name)
    for i, r in enumerate(records):
        samples += [(i, b, r.class_name) for b in r.instance_boxes or r.gt_boxes]
        samples += [(i, b, c) for c, b in r.distractors]
    names = sorted({c for _, _, c in samples})
    if len(names) < 2:
        raise DataError("need at least two classes to train the embedding network")
    names.append(BACKGROUND)
    label = {c: j for j, c in enumerate(names)}

    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    net = EmbeddingNetwork(names, cfg.embedding_dim, cfg.patch_size, cfg.widths)
    # every 10th instance is held out to measure generalization to unseen instances
    held = [s for j, s in enumerate(samples) if j % 10 == 0]
    fit = [s for j, s in enumerate(samples) if j % 10 != 0]
    images = [to_tensor(r.pixels) for r in records]
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.epochs, 1))
    loss_fn = nn.CrossEntropyLoss()
    trainlog = EmbeddingTrainLog()

    def batch_tensors(items, jitter: bool):
        crops, labels = [], []
        for i, b, c in items:
            r = records[i]
            if jitter:
                b = _jitter(b, r.height, r.width, rng)
            crops.append(crop_resize(images[i], [b], cfg.patch_size))
            labels.append(label[c])
        return torch.cat(crops), torch.tensor(labels)

    n_bg = int(round(cfg.background_fraction * len(fit)))
    for epoch in range(cfg.epochs):
        epoch_items = list(fit)
        for _ in range(n_bg):
            i = int(rng.integers(len(records)))
            b = _background_box(records[i], rng)
            if b is not None:
                epoch_items.append((i, b, BACKGROUND))
        order = rng.permutation(len(epoch_items))
        net.train()
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            x, y = batch_tensors([epoch_items[j] for j in order[start:start + cfg.batch_size]],
                                 jitter=True)
            loss = loss_fn(net(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(y)
            seen += len(y)
        sched.step()
        trainlog.losses.append(total / seen)
        log.info("embed epoch %d loss %.4f", epoch, total / seen)

    trainlog.train_accuracy = _accuracy(net, batch_tensors(fit, jitter=False))
    trainlog.heldout_accuracy = _accuracy(net, batch_tensors(held, jitter=False)) if held else 0.0
    log.info("embed accuracy train %.3f held-out %.3f", trainlog.train_accuracy,
             trainlog.heldout_accuracy)
    net.eval()
    return net, trainlog


@torch.no_grad()
def _accuracy(net: EmbeddingNetwork, xy) -> float:
    net.eval()
    x, y = xy
    return float((net(x).argmax(1) == y).float().mean())


# ---------------------------------------------------------------- semantics

@dataclass
class SemanticEmbedding:
    class_name: str
    vector: np.ndarray


def _hashed_unit_vector(token: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x00{token}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class HashedSemanticProvider:
    """Deterministic unit vectors derived from a hash of the class name.

    With ``compositional=True`` the name is split on ``-``, ``_`` and spaces and
    the token vectors are summed before normalizing, so classes sharing words
    share directions (a crude stand-in for a text encoder). A single-word name
    gives the same vector in both modes.
    """

    def __init__(self, dim: int = 512, seed: int = 0, compositional: bool = True):
        self.dim, self.seed, self.compositional = dim, seed, compositional

    def embed(self, class_name: str) -> SemanticEmbedding:
        if self.compositional:
            tokens = class_name.replace("_", " ").replace("-", " ").split() or [class_name]
        else:
            tokens = [class_name]
        v = sum(_hashed_unit_vector(t, self.dim, self.seed) for t in tokens)
        return SemanticEmbedding(class_name, v / np.linalg.norm(v))


class FileSemanticProvider:
    """Lookup table ``{class_name: [floats]}``, e.g. exported text-model vectors."""

    def __init__(self, table: dict[str, Sequence[float]]):
        dims = {len(v) for v in table.values()}
        if len(dims) > 1:
            raise ValueError(f"inconsistent vector lengths in semantic table: {sorted(dims)}")
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        self.dim = dims.pop() if dims else 0

    @classmethod
    def from_json(cls, path: str | Path) -> "FileSemanticProvider":
        return cls(json.loads(Path(path).read_text()))

    def embed(self, class_name: str) -> SemanticEmbedding:
        try:
            return SemanticEmbedding(class_name, self.table[class_name].copy())
        except KeyError:
            raise KeyError(f"class {class_name!r} not in semantic table") from None


def semantic_embedding(provider, class_name: str) -> SemanticEmbedding:
    return provider.embed(class_name)


def make_provider(cfg: SemanticConfig):
    if cfg.mode == "file":
        return FileSemanticProvider.from_json(cfg.path)
    return HashedSemanticProvider(cfg.dim, cfg.seed, compositional=cfg.mode == "compositional")
