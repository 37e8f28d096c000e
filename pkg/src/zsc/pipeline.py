"""End-to-end training and split evaluation on top of the module APIs."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig, SelectorConfig
from .counter import BaseCountingModel, train_base_model
from .crops import to_tensor
from .data import (BoundingBox, DatasetBundle, ImageRecord, SyntheticSpec,
                   generate_synthetic_dataset, preprocess_image)
from .embedding import (EmbeddingNetwork, _jitter, embed_patches, make_provider,
                        semantic_embedding, train_embedding_network)
from .metrics import MetricsReport, evaluate
from .prototype import ConditionalVAE, train_vae
from .selector import (Models, count_with_prototype_baseline, count_with_random_exemplars,
                       select_exemplars, train_error_predictor)

log = logging.getLogger(__name__)


def object_boxes(r: ImageRecord) -> list[tuple[str, BoundingBox]]:
    """Every annotated object: target instances (or GT boxes) plus distractors."""
    return [(r.class_name, b) for b in (r.instance_boxes or r.gt_boxes)] + list(r.distractors)


def vae_training_pairs(net: EmbeddingNetwork, records: Sequence[ImageRecord], provider,
                       seed: int = 0, crops_per_object: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings of jittered object crops, paired with their class's semantic vector."""
    rng = np.random.default_rng(seed)
    xs, names = [], []
    for r in records:
        objs = object_boxes(r)
        boxes = [_jitter(b, r.height, r.width, rng) for _, b in objs for _ in range(crops_per_object)]
        xs.append(embed_patches(net, r.pixels, boxes))
        names += [c for c, _ in objs for _ in range(crops_per_object)]
    table = {c: semantic_embedding(provider, c).vector for c in sorted(set(names))}
    return np.concatenate(xs), np.stack([table[c] for c in names])


@torch.no_grad()
def counting_space_pairs(base: BaseCountingModel, records: Sequence[ImageRecord], provider
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Pooled counter exemplar vectors ``b`` of every object box, with semantic vectors."""
    base.eval()
    xs, names = [], []
    for r in records:
        objs = object_boxes(r)
        img = to_tensor(r.pixels, base.dtype)
        xs.append(base.exemplar_vectors(img, [b for _, b in objs]).double().numpy())
        names += [c for c, _ in objs]
    table = {c: semantic_embedding(provider, c).vector for c in sorted(set(names))}
    return np.concatenate(xs), np.stack([table[c] for c in names])


@dataclass
class TrainedBundle:
    models: Models
    logs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


def build_dataset(cfg: RunConfig) -> DatasetBundle:
    bundle = generate_synthetic_dataset(SyntheticSpec.from_config(cfg.data))
    return prepare(bundle, cfg)


def prepare(bundle: DatasetBundle, cfg: RunConfig) -> DatasetBundle:
    records = {s: [preprocess_image(r, cfg.data.target_height) for r in rs]
               for s, rs in bundle.records.items()}
    return replace(bundle, records=records)


def train_all(cfg: RunConfig, bundle: DatasetBundle) -> TrainedBundle:
    train = bundle.split("train")
    provider = make_provider(cfg.semantic)
    timings, logs = {}, {}

    t = time.perf_counter()
    embed, logs["embed"] = train_embedding_network(train, cfg.embed)
    timings["embed"] = time.perf_counter() - t

    t = time.perf_counter()
    base, logs["counter"] = train_base_model(train, cfg.counter, cfg.data.sigma)
    timings["counter"] = time.perf_counter() - t

    t = time.perf_counter()
    x, a = vae_training_pairs(embed, train, provider, cfg.vae.seed)
    vae, logs["vae"] = train_vae(x, a, cfg.vae)
    xb, ab = counting_space_pairs(base, train, provider)
    counting_vae, logs["counting_vae"] = train_vae(xb, ab, cfg.vae, output_activation="none")
    timings["vae"] = time.perf_counter() - t

    t = time.perf_counter()
    predictor, logs["predictor"] = train_error_predictor(base, train, cfg.predictor, cfg.selector)
    timings["predictor"] = time.perf_counter() - t

    models = Models(embed, vae, base, predictor, provider, counting_vae,
                    n_samples=cfg.vae.n_samples, prototype_seed=cfg.vae.seed)
    return TrainedBundle(models, logs, timings)


def inside_target(r: ImageRecord, box: BoundingBox) -> bool:
    cx, cy = box.center
    return any(b.contains(cx, cy) for b in r.instance_boxes)


@dataclass
class ModeResult:
    report: MetricsReport
    per_seed_mae: list[float]
    precision: float | None = None  # fraction of exemplar centers inside a target instance


def predict_counts(models: Models, records: Sequence[ImageRecord], sel: SelectorConfig,
                   mode: str, seed: int) -> tuple[list[float], list[bool]]:
    cfg = replace(sel, seed=seed)
    preds, hits = [], []
    for r in records:
        if mode == "gt-exemplar":
            _, n = models.base.count_with_exemplars(r.pixels, r.gt_boxes)
            boxes = r.gt_boxes
        elif mode == "random":
            n, boxes = count_with_random_exemplars(r.pixels, cfg.s, models.base, seed, cfg,
                                                   image_id=r.image_id)
        elif mode == "prototype-direct-baseline":
            n, _ = count_with_prototype_baseline(r.pixels, r.class_name, models)
            boxes = []
        else:
            res = select_exemplars(r.pixels, r.class_name, models, cfg, image_id=r.image_id,
                                   mode=mode)
            n, boxes = res.count, res.exemplar_boxes
        preds.append(n)
        hits += [inside_target(r, b) for b in boxes]
    return preds, hits


SEEDLESS = ("gt-exemplar", "prototype-direct-baseline")


def evaluate_modes(models: Models, records: Sequence[ImageRecord], sel: SelectorConfig,
                   modes: Sequence[str], seeds: Sequence[int]) -> dict[str, ModeResult]:
    out = {}
    gts = [r.count for r in records]
    for mode in modes:
        use = seeds[:1] if mode in SEEDLESS else seeds
        all_gt, all_pred, maes, hits = [], [], [], []
        for seed in use:
            preds, h = predict_counts(models, records, sel, mode, seed)
            maes.append(evaluate(gts, preds).mae)
            all_gt += gts
            all_pred += preds
            hits += h
        out[mode] = ModeResult(evaluate(all_gt, all_pred), maes,
                               float(np.mean(hits)) if hits else None)
        log.info("%s: MAE %.3f per-seed %s", mode, out[mode].report.mae,
                 ", ".join(f"{m:.3f}" for m in maes))
    return out
