"""Zero-shot exemplar selection and counting.

Pipeline for an image and a class name: sample candidate boxes, embed them,
keep the k nearest to the class prototype, score those with the error
predictor, and count with the s lowest-scoring boxes as exemplars.
"""

from __future__ import annotations

import json
import logging
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import PredictorConfig, SelectorConfig
from .counter import BaseCountingModel, count, predict_density, similarity_map
from .crops import to_tensor
from .data import BoundingBox, DataError, ImageRecord
from .embedding import EmbeddingNetwork, embed_patches, semantic_embedding
from .prototype import ClassPrototype, ConditionalVAE, generate_class_prototype

log = logging.getLogger(__name__)

# when set, every top-s pick is cross-checked against a full sort
CHECK_SELECTION = bool(os.environ.get("ZSC_CHECK_SELECTION"))

MODES = ("gt-exemplar", "random", "prototype-only", "prototype+predictor",
         "prototype-direct-baseline")


@dataclass
class CandidatePatch:
    box: BoundingBox
    embedding: np.ndarray | None = None
    prototype_distance: float | None = None
    predicted_error: float | None = None
    source: str = "random"
    score: float | None = None


@dataclass
class SelectionResult:
    candidates: list[CandidatePatch]
    class_relevant_indices: list[int]
    exemplar_indices: list[int]
    density: np.ndarray
    count: float

    @property
    def exemplar_boxes(self) -> list[BoundingBox]:
        return [self.candidates[i].box for i in self.exemplar_indices]


# ---------------------------------------------------------------- candidates

def image_rng(seed: int, image_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(image_id.encode())])


def sample_patches(height: int, width: int, cfg: SelectorConfig,
                   rng: np.random.Generator | None = None) -> list[BoundingBox]:
    """``cfg.M`` fully contained boxes; side from the size range, aspect in [0.75, 1.33]."""
    if cfg.size_max > min(height, width) or cfg.size_min < 1:
        raise DataError(f"size range [{cfg.size_min}, {cfg.size_max}] does not fit "
                        f"a {width}x{height} image")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    side = rng.uniform(cfg.size_min, cfg.size_max, size=cfg.M)
    aspect = np.sqrt(rng.uniform(0.75, 1.33, size=cfg.M))
    bw = np.clip(np.round(side * aspect), 1, width).astype(int)
    bh = np.clip(np.round(side / aspect), 1, height).astype(int)
    x1 = (rng.random(cfg.M) * (width - bw + 1)).astype(int)
    y1 = (rng.random(cfg.M) * (height - bh + 1)).astype(int)
    return [BoundingBox(int(x), int(y), int(x + w), int(y + h))
            for x, y, w, h in zip(x1, y1, bw, bh)]


class ProposalSource(Protocol):
    def proposals(self, image_id: str, height: int, width: int
                  ) -> list[tuple[BoundingBox, float | None]]: ...


class RandomProposals:
    name = "random"

    def __init__(self, cfg: SelectorConfig):
        self.cfg = cfg

    def proposals(self, image_id, height, width):
        boxes = sample_patches(height, width, self.cfg, image_rng(self.cfg.seed, image_id))
        return [(b, None) for b in boxes]


class FileProposals:
    """Externally generated proposals: JSON ``{image_id: [[x1,y1,x2,y2] | {"box", "score"}]}``."""

    name = "external"

    def __init__(self, table: dict[str, list]):
        self.table = table

    @classmethod
    def from_json(cls, path: str | Path) -> "FileProposals":
        return cls(json.loads(Path(path).read_text()))

    def proposals(self, image_id, height, width):
        if image_id not in self.table:
            raise KeyError(f"no proposals for image {image_id!r}")
        out = []
        for item in self.table[image_id]:
            if isinstance(item, dict):
                box, score = BoundingBox(*map(int, item["box"])), item.get("score")
            else:
                box, score = BoundingBox(*map(int, item)), None
            if not box.inside(height, width):
                raise DataError(f"proposal {box.as_list()} outside image {image_id}")
            out.append((box, None if score is None else float(score)))
        return out


def select_class_relevant(candidates: Sequence[CandidatePatch], prototype: ClassPrototype | np.ndarray,
                          k: int) -> list[int]:
    """Indices of the k embeddings nearest the prototype (L2), ties by lower index."""
    if k > len(candidates) or k < 1:
        raise ValueError(f"k={k} infeasible for {len(candidates)} candidates")
    p = prototype.vector if isinstance(prototype, ClassPrototype) else np.asarray(prototype)
    emb = np.stack([c.embedding for c in candidates])
    dist = np.linalg.norm(emb - p, axis=1)
    for c, d in zip(candidates, dist):
        c.prototype_distance = float(d)
    return np.argsort(dist, kind="stable")[:k].tolist()


def smallest(values: Sequence[float], indices: Sequence[int], s: int) -> list[int]:
    """The s entries of ``indices`` with the smallest values, ties by lower index."""
    vals = np.asarray(values, dtype=np.float64)
    idx = np.asarray(indices)
    order = np.lexsort((idx, vals))[:s]
    picked = idx[order].tolist()
    if CHECK_SELECTION:
        full = sorted(zip(vals.tolist(), idx.tolist()))[:s]
        assert picked == [i for _, i in full], "top-s selection disagrees with full sort"
    return picked


# ---------------------------------------------------------------- error predictor

class ErrorPredictor(nn.Module):
    """Five 3x3 convs over [F(I), S], pooled to 5x5, then a 25 -> 1 linear layer.

    The last conv has a single output channel and no ReLU, so it cannot die.
    """

    def __init__(self, in_channels: int, widths: Sequence[int] = (32, 32, 32, 32)):
        super().__init__()
        if len(widths) != 4:
            raise ValueError("error predictor needs four hidden widths (five convs)")
        self.in_channels, self.widths = in_channels, tuple(widths)
        chans = [in_channels, *widths, 1]
        strides = [1, 2, 1, 1, 1]
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, stride=st, padding=1)
                                   for a, b, st in zip(chans, chans[1:], strides))
        self.linear = nn.Linear(25, 1)
        # per-channel input standardization, fitted on the training patches;
        # S is an unnormalized inner product, tens of times larger than F
        self.register_buffer("shift", torch.zeros(in_channels))
        self.register_buffer("scale", torch.ones(in_channels))

    def arch(self) -> dict:
        return {"in_channels": self.in_channels, "widths": list(self.widths)}

    def forward(self, feats: torch.Tensor, sims: torch.Tensor) -> torch.Tensor:
        """(B, d, h, w), (B, h, w) -> (B,)"""
        x = torch.cat([feats, sims[:, None]], dim=1)
        x = (x - self.shift[:, None, None]) / self.scale[:, None, None]
        for conv in self.convs[:-1]:
            x = F.relu(conv(x))
        x = F.adaptive_avg_pool2d(self.convs[-1](x), (5, 5)).flatten(1)
        return self.linear(x)[:, 0]


@torch.no_grad()
def predict_patch_error(predictor: ErrorPredictor, featmap: torch.Tensor, simmap: torch.Tensor
                        ) -> float:
    if featmap.shape[1:] != simmap.shape:
        raise ValueError(f"feature map {tuple(featmap.shape[1:])} vs similarity {tuple(simmap.shape)}")
    predictor.eval()
    dtype = next(predictor.parameters()).dtype
    return float(predictor(featmap[None].to(dtype), simmap[None].to(dtype))[0])


@torch.no_grad()
def patch_errors(base: BaseCountingModel, image: torch.Tensor, feats: torch.Tensor,
                 boxes: Sequence[BoundingBox], true_count: float, chunk: int = 32
                 ) -> tuple[torch.Tensor, np.ndarray, np.ndarray]:
    """Single-exemplar similarity maps, predicted counts and raw errors for each box."""
    vecs = base.exemplar_vectors(image, boxes)
    sims = torch.einsum("chw,nc->nhw", feats, vecs)
    counts = []
    for i in range(0, len(boxes), chunk):
        s = sims[i:i + chunk]
        dens = base.decode(feats[None].expand(len(s), -1, -1, -1), s[:, None], image.shape[1:])
        counts.append(dens.double().sum(dim=(1, 2)))
    counts = torch.cat(counts).numpy()
    return sims, counts, np.abs(counts - true_count)


@dataclass
class PredictorTrainLog:
    epoch_losses: list[float] = field(default_factory=list)
    n_patches: int = 0


def error_target(err: np.ndarray, true_count: float, normalized: bool = True) -> np.ndarray:
    return err / max(true_count, 1.0) if normalized else err


def train_error_predictor(base: BaseCountingModel, records: Sequence[ImageRecord],
                          cfg: PredictorConfig, patch_cfg: SelectorConfig
                          ) -> tuple[ErrorPredictor, PredictorTrainLog]:
    """Regress the frozen counter's (normalized) error for random single-patch exemplars."""
    if not base.trained:
        raise ValueError("base counting model is untrained")
    if not records:
        raise DataError("empty training set")
    base.eval()
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    feats_all, sims_all, targets, owner = [], [], [], []
    sampler = SelectorConfig(M=cfg.patches_per_image, k=1, s=1, size_min=patch_cfg.size_min,
                             size_max=patch_cfg.size_max)
    for i, r in enumerate(records):
        img = to_tensor(r.pixels, base.dtype)
        with torch.no_grad():
            feats = base.features(img[None])[0]
        boxes = sample_patches(r.height, r.width, sampler, rng)
        sims, _, err = patch_errors(base, img, feats, boxes, r.count)
        feats_all.append(feats)
        sims_all.append(sims)
        targets.append(error_target(err, r.count, cfg.normalized))
        owner += [i] * len(boxes)
    sims_t = torch.cat(sims_all).float()
    feats_t = torch.stack(feats_all).float()
    y = torch.from_numpy(np.concatenate(targets)).float()
    owner_t = torch.tensor(owner)

    predictor = ErrorPredictor(feats_t.shape[1] + 1, cfg.widths)
    with torch.no_grad():
        predictor.shift[:-1] = feats_t.mean(dim=(0, 2, 3))
        predictor.scale[:-1] = feats_t.std(dim=(0, 2, 3)).clamp_min(1e-6)
        predictor.shift[-1] = sims_t.mean()
        predictor.scale[-1] = sims_t.std().clamp_min(1e-6)
    opt = torch.optim.AdamW(predictor.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.epochs, 1))
    trainlog = PredictorTrainLog(n_patches=len(y))
    for epoch in range(cfg.epochs):
        predictor.train()
        order = torch.from_numpy(rng.permutation(len(y)))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            f, sm = feats_t[owner_t[idx]], sims_t[idx]
            if cfg.flip:
                # mirror half the batch; the error of a patch does not depend on handedness
                m = torch.from_numpy(rng.random(len(idx)) < 0.5)
                f = torch.where(m[:, None, None, None], f.flip(-1), f)
                sm = torch.where(m[:, None, None], sm.flip(-1), sm)
            pred = predictor(f, sm)
            loss = F.mse_loss(pred, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        trainlog.epoch_losses.append(total / len(y))
        log.info("predictor epoch %d mse %.5f", epoch, total / len(y))
    predictor.eval()
    return predictor, trainlog


# ---------------------------------------------------------------- pipeline

class ExemplarCounter(Protocol):
    """Anything that counts from exemplar boxes, e.g. another few-shot counter."""

    def count_with_exemplars(self, image: np.ndarray, boxes: Sequence[BoundingBox]
                             ) -> tuple[np.ndarray, float]: ...


@dataclass
class Models:
    embedding: EmbeddingNetwork
    vae: ConditionalVAE
    base: BaseCountingModel
    predictor: ErrorPredictor
    semantics: object
    counting_vae: ConditionalVAE | None = None
    n_samples: int = 256
    prototype_seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def prototype(self, class_name: str, counting_space: bool = False) -> ClassPrototype:
        key = (class_name, counting_space)
        if key not in self._cache:
            vae = self.counting_vae if counting_space else self.vae
            if vae is None:
                raise ValueError("no counting-space VAE trained for the prototype baseline")
            a = semantic_embedding(self.semantics, class_name)
            self._cache[key] = generate_class_prototype(vae, a, self.n_samples, self.prototype_seed)
        return self._cache[key]


def select_exemplars(image: np.ndarray, class_name: str, models: Models, cfg: SelectorConfig,
                     image_id: str = "", mode: str = "prototype+predictor",
                     proposals: ProposalSource | None = None, scoring: str = "predictor",
                     counter: ExemplarCounter | None = None) -> SelectionResult:
    """Pick exemplars for ``class_name`` in ``image`` and count with them.

    ``mode`` is ``prototype+predictor`` (the full method), ``prototype-only``
    (the s candidates nearest the prototype) or ``predictor-only`` (lowest
    predicted error over all candidates). ``scoring="objectness"`` ranks the
    class-relevant candidates by the proposal scores instead of the predictor.
    """
    cfg.validate()
    base = models.base
    base.eval()
    h, w = image.shape[:2]
    source = proposals or RandomProposals(cfg)
    props = source.proposals(image_id, h, w)
    if len(props) < cfg.k:
        raise ValueError(f"k={cfg.k} exceeds the {len(props)} candidates")
    tag = getattr(source, "name", "external")
    emb = embed_patches(models.embedding, image, [b for b, _ in props])
    candidates = [CandidatePatch(b, e, source=tag, score=sc) for (b, sc), e in zip(props, emb)]

    if mode == "predictor-only":
        relevant = list(range(len(candidates)))
    else:
        relevant = select_class_relevant(candidates, models.prototype(class_name), cfg.k)

    img = to_tensor(image, base.dtype)
    with torch.no_grad():
        feats = base.features(img[None])[0]
    if mode == "prototype-only":
        chosen = relevant[:cfg.s]
    elif scoring == "objectness":
        if any(candidates[i].score is None for i in relevant):
            raise ValueError("objectness scoring needs proposal scores")
        chosen = smallest([-candidates[i].score for i in relevant], relevant, cfg.s)
    elif mode in ("prototype+predictor", "predictor-only"):
        boxes = [candidates[i].box for i in relevant]
        with torch.no_grad():
            vecs = base.exemplar_vectors(img, boxes)
            sims = torch.einsum("chw,nc->nhw", feats, vecs)
            models.predictor.eval()
            dtype = next(models.predictor.parameters()).dtype
            preds = models.predictor(feats[None].expand(len(boxes), -1, -1, -1).to(dtype),
                                     sims.to(dtype)).double().numpy()
        for i, p in zip(relevant, preds):
            candidates[i].predicted_error = float(p)
        chosen = smallest(preds, relevant, cfg.s)
    else:
        raise ValueError(f"unknown selection mode {mode!r}")

    boxes = [candidates[i].box for i in chosen]
    if counter is not None:
        density, n = counter.count_with_exemplars(image, boxes)
    else:
        with torch.no_grad():
            sim = similarity_map(feats, base.exemplar_vectors(img, boxes))
            dens = predict_density(base, feats, sim, (h, w))
        density, n = dens.double().numpy(), count(dens)
    return SelectionResult(candidates, relevant, chosen, density, n)


def count_zero_shot(image: np.ndarray, class_name: str, models: Models, cfg: SelectorConfig,
                    image_id: str = "") -> tuple[float, SelectionResult]:
    result = select_exemplars(image, class_name, models, cfg, image_id=image_id)
    return result.count, result


@torch.no_grad()
def count_with_prototype_baseline(image: np.ndarray, class_name: str, models: Models
                                  ) -> tuple[float, np.ndarray]:
    """Use the counting-space prototype directly as the exemplar vector ``b``."""
    base = models.base
    base.eval()
    proto = models.prototype(class_name, counting_space=True)
    img = to_tensor(image, base.dtype)
    feats = base.features(img[None])[0]
    b = torch.from_numpy(proto.vector).to(base.dtype)
    dens = predict_density(base, feats, similarity_map(feats, b), img.shape[1:])
    return count(dens), dens.double().numpy()


def count_with_random_exemplars(image: np.ndarray, s: int, base: BaseCountingModel, seed: int,
                                cfg: SelectorConfig | None = None, image_id: str = ""
                                ) -> tuple[float, list[BoundingBox]]:
    """Count with ``s`` uniformly sampled patches as exemplars, no selection."""
    cfg = cfg or SelectorConfig()
    sampler = SelectorConfig(M=s, k=s, s=s, size_min=cfg.size_min, size_max=cfg.size_max)
    boxes = sample_patches(image.shape[0], image.shape[1], sampler, image_rng(seed, image_id))
    _, n = base.count_with_exemplars(image, boxes)
    return n, boxes
