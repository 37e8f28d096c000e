"""Exemplar-based base counting model.

Image and exemplar crops go through a shared feature extractor. Each exemplar
is pooled to a vector ``b``; the similarity map is the per-cell inner product
with ``b`` (averaged over exemplars). Features and similarity are concatenated
and decoded into a nonnegative density map whose sum is the count.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import CounterConfig
from .crops import crop_resize, to_tensor
from .data import BoundingBox, DataError, ImageRecord

log = logging.getLogger(__name__)


class BaseCountingModel(nn.Module):
    def __init__(self, backbone_widths: Sequence[int] = (16, 32, 64), reduced_channels: int = 32,
                 head_widths: Sequence[int] = (64, 32, 16, 16), exemplar_size: int = 32,
                 density_scale: float = 100.0):
        super().__init__()
        self.density_scale = density_scale
        self.trained = False
        if len(head_widths) != 4:
            raise ValueError("counter head needs exactly four hidden widths (five convs)")
        self.backbone_widths = tuple(backbone_widths)
        self.head_widths = tuple(head_widths)
        self.reduced_channels = reduced_channels
        self.exemplar_size = exemplar_size
        self.stride = 2 ** len(backbone_widths)

        layers, c = [], 3
        for w in backbone_widths:
            layers += [nn.Conv2d(c, w, 3, stride=2, padding=1), nn.ReLU(),
                       nn.Conv2d(w, w, 3, padding=1), nn.ReLU()]
            c = w
        self.backbone = nn.Sequential(*layers)
        self.reduce = nn.Conv2d(c, reduced_channels, 1)

        widths = [reduced_channels + 1, *head_widths]
        self.head = nn.ModuleList(nn.Conv2d(a, b, 3, padding=1) for a, b in zip(widths, widths[1:]))
        self.out = nn.Conv2d(head_widths[-1], 1, 1)
        # start near the typical scaled density (~0.1); starting high makes the
        # first steps shove everything toward zero and the head can stall there
        nn.init.constant_(self.out.bias, -2.0)

    def arch(self) -> dict:
        return {"backbone_widths": list(self.backbone_widths), "head_widths": list(self.head_widths),
                "reduced_channels": self.reduced_channels, "exemplar_size": self.exemplar_size,
                "density_scale": self.density_scale}

    @classmethod
    def from_config(cls, cfg: CounterConfig) -> "BaseCountingModel":
        return cls(cfg.backbone_widths, cfg.reduced_channels, cfg.head_widths, cfg.exemplar_size,
                   cfg.density_scale)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.reduce(self.backbone(images))

    def exemplar_vectors(self, image: torch.Tensor, boxes: Sequence[BoundingBox]) -> torch.Tensor:
        if not boxes:
            raise DataError("need at least one exemplar box")
        crops = crop_resize(image, boxes, self.exemplar_size)
        return self.features(crops).mean(dim=(2, 3))

    def decode(self, feats: torch.Tensor, sim: torch.Tensor, out_size: tuple[int, int]
               ) -> torch.Tensor:
        """(B, d, h, w) features + (B, 1, h, w) similarity -> (B, H, W) density."""
        x = torch.cat([feats, sim], dim=1)
        n_up = len(self.backbone_widths)
        for i, conv in enumerate(self.head):
            x = F.relu(conv(x))
            if i < n_up:
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        # the head regresses density * density_scale so its outputs are O(1)
        x = F.softplus(self.out(x))[:, 0] / self.density_scale
        h, w = out_size
        x = x[:, :h, :w]
        return F.pad(x, (0, w - x.shape[2], 0, h - x.shape[1]))

    @torch.no_grad()
    def count_with_exemplars(self, image: np.ndarray, boxes: Sequence[BoundingBox]
                             ) -> tuple[np.ndarray, float]:
        """Counter-plugin contract: exemplar boxes in, (density, count) out."""
        self.eval()
        img = to_tensor(image, self.dtype)
        feats = self.features(img[None])[0]
        sim = similarity_map(feats, self.exemplar_vectors(img, boxes))
        dens = predict_density(self, feats, sim, img.shape[1:])
        return dens.double().numpy(), count(dens)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype


def extract_features(model: BaseCountingModel, image: np.ndarray | torch.Tensor) -> torch.Tensor:
    """(d, h, w) feature map of one (H, W, 3) image."""
    img = to_tensor(image, model.dtype) if isinstance(image, np.ndarray) else image
    return model.features(img[None])[0]


def exemplar_vector(model: BaseCountingModel, image: np.ndarray | torch.Tensor,
                    box: BoundingBox) -> torch.Tensor:
    img = to_tensor(image, model.dtype) if isinstance(image, np.ndarray) else image
    return model.exemplar_vectors(img, [box])[0]


def similarity_map(featmap: torch.Tensor, exemplars: torch.Tensor | Sequence[torch.Tensor]
                   ) -> torch.Tensor:
    """Mean over exemplars of ``S_ij = w_ij . b`` for a (d, h, w) feature map.

    The mean is taken as ``S_0 + sum(S_i - S_0) / n`` so that repeated
    exemplars reproduce the single-exemplar map bit for bit.
    """
    if not isinstance(exemplars, torch.Tensor):
        if len(exemplars) == 0:
            raise ValueError("need at least one exemplar vector")
        exemplars = torch.stack(list(exemplars))
    if exemplars.ndim == 1:
        exemplars = exemplars[None]
    if exemplars.shape[0] == 0:
        raise ValueError("need at least one exemplar vector")
    if exemplars.shape[1] != featmap.shape[0]:
        raise ValueError(f"exemplar dim {exemplars.shape[1]} != feature channels {featmap.shape[0]}")
    # elementwise product + channel sum: each map is computed the same way
    # whatever n is, unlike a batched matmul whose blocking depends on n
    maps = (featmap[None] * exemplars[:, :, None, None]).sum(dim=1)
    return maps[0] + (maps - maps[0]).sum(dim=0) / maps.shape[0]


def predict_density(model: BaseCountingModel, featmap: torch.Tensor, simmap: torch.Tensor,
                    out_size: tuple[int, int]) -> torch.Tensor:
    if featmap.shape[1:] != simmap.shape:
        raise ValueError(f"feature map {tuple(featmap.shape[1:])} vs similarity {tuple(simmap.shape)}")
    return model.decode(featmap[None], simmap[None, None], tuple(out_size))[0]


def count(density) -> float:
    if isinstance(density, torch.Tensor):
        return float(density.double().sum())
    return float(np.sum(density, dtype=np.float64))


def counting_loss(pred, target):
    """Squared L2 norm of the difference, summed over pixels; mean over a leading batch axis."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    sq = (pred - target) ** 2
    if sq.ndim == 3:
        return sq.sum(dim=(1, 2)).mean() if isinstance(sq, torch.Tensor) else sq.sum(axis=(1, 2)).mean()
    return sq.sum()


@dataclass
class CounterTrainLog:
    initial_loss: float = 0.0
    final_loss: float = 0.0
    epoch_losses: list[float] = field(default_factory=list)


def _batch_loss(model: BaseCountingModel, images: list[torch.Tensor], targets: list[torch.Tensor],
                exemplars: list[list[BoundingBox]]) -> torch.Tensor:
    same = len({tuple(im.shape) for im in images}) == 1
    if same:
        feats = model.features(torch.stack(images))
    else:
        feats = [model.features(im[None])[0] for im in images]
    crops = torch.cat([crop_resize(im, bx, model.exemplar_size) for im, bx in zip(images, exemplars)])
    vecs = model.features(crops).mean(dim=(2, 3)).split([len(b) for b in exemplars])
    sims = [similarity_map(f, v) for f, v in zip(feats, vecs)]
    if same:
        dens = model.decode(feats, torch.stack(sims)[:, None], tuple(images[0].shape[1:]))
        return counting_loss(dens, torch.stack(targets))
    losses = [counting_loss(predict_density(model, f, s, im.shape[1:]), t)
              for f, s, im, t in zip(feats, sims, images, targets)]
    return torch.stack(losses).mean()


@torch.no_grad()
def dataset_loss(model: BaseCountingModel, records: Sequence[ImageRecord], sigma: float,
                 n_exemplars: int = 3) -> float:
    """Mean counting loss using the first ``n_exemplars`` ground-truth boxes."""
    model.eval()
    total = 0.0
    for r in records:
        img = to_tensor(r.pixels, model.dtype)
        tgt = torch.from_numpy(r.density_target(sigma)).to(model.dtype)
        total += float(_batch_loss(model, [img], [tgt], [r.gt_boxes[:n_exemplars]]))
    return total / len(records)


def train_base_model(records: Sequence[ImageRecord], cfg: CounterConfig, sigma: float = 2.0
                     ) -> tuple[BaseCountingModel, CounterTrainLog]:
    """AdamW on the pixel-sum L2 density loss.

    Each step uses, per image, a random subset of 1..n_exemplars ground-truth boxes.
    """
    bad = [r.image_id for r in records if not r.gt_boxes]
    if bad:
        raise DataError(f"records without gt_boxes: {bad[:5]}")
    if not records:
        raise DataError("empty training set")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = BaseCountingModel.from_config(cfg)
    images = [to_tensor(r.pixels) for r in records]
    targets = [torch.from_numpy(r.density_target(sigma)).float() for r in records]

    trainlog = CounterTrainLog(initial_loss=dataset_loss(model, records, sigma, cfg.n_exemplars))
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.epochs, 1))
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(records))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            exemplars = []
            for i in idx:
                boxes = records[i].gt_boxes
                n = int(rng.integers(1, min(cfg.n_exemplars, len(boxes)) + 1))
                pick = np.sort(rng.choice(len(boxes), size=n, replace=False))
                exemplars.append([boxes[j] for j in pick])
            loss = _batch_loss(model, [images[i] for i in idx], [targets[i] for i in idx], exemplars)
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        trainlog.epoch_losses.append(total / len(records))
        log.info("counter epoch %d loss %.5f", epoch, total / len(records))
    trainlog.final_loss = dataset_loss(model, records, sigma, cfg.n_exemplars)
    model.trained = True
    model.eval()
    return model, trainlog
