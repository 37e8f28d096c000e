"""``zsc`` command line: one subcommand per pipeline stage.

Artifacts live under ``$ZSC_RUN_DIR`` (default ``./runs``), one directory per
stage. Each invocation writes a fresh timestamped subdirectory holding its
outputs plus ``manifest.json``; ``--overwrite`` reuses the newest one instead.
Later stages read the newest completed directory of their prerequisites.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import subprocess
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import __version__
from .checkpoint import CheckpointError, load_model, save_model
from .config import ConfigError, RunConfig, load_config
from .counter import train_base_model
from .data import DataError, DatasetBundle, ImageRecord, generate_synthetic_dataset, load_dataset, \
    preprocess_image, save_dataset, SyntheticSpec
from .embedding import make_provider, semantic_embedding, train_embedding_network
from .metrics import CSV_FIELDS
from .pipeline import counting_space_pairs, evaluate_modes, prepare, vae_training_pairs
from .prototype import generate_class_prototype, train_vae
from .selector import MODES, FileProposals, Models, select_exemplars, train_error_predictor
from .visualize import emit_class_heatmap, save_density_png

log = logging.getLogger("zsc")

STAGES = ("synth-data", "train-embed", "train-counter", "train-vae", "train-predictor",
          "infer", "eval", "ablate")

# config namespaces (or single keys) each artifact depends on; a checkpoint is
# stale when the hash over these differs from the current config
MODULE_SECTIONS = {
    "data": ("data",),
    "embedding": ("data", "embed"),
    "counter": ("data", "counter"),
    "vae": ("data", "semantic", "embed", "vae"),
    "counting_vae": ("data", "semantic", "counter", "vae"),
    "predictor": ("data", "counter", "predictor", "selector.size_min", "selector.size_max"),
}

# artifact -> the stage that produces it
PRODUCER = {
    "dataset": "synth-data",
    "embedding": "train-embed",
    "counter": "train-counter",
    "vae": "train-vae",
    "counting_vae": "train-vae",
    "predictor": "train-predictor",
}

AXES = {
    "num_exemplars": ("s", (1, 2, 3, 4, 5)),
    "num_proposals": ("M", (150, 300, 450, 600)),
    "k_neighbors": ("k", (5, 10, 25, 50)),
}


class StageError(RuntimeError):
    pass


def run_root() -> Path:
    return Path(os.environ.get("ZSC_RUN_DIR", "runs"))


def artifact_version() -> str:
    """``git describe`` of the source checkout, or the package version outside git."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _completed(stage_dir: Path) -> list[Path]:
    if not stage_dir.is_dir():
        return []
    runs = [p for p in stage_dir.iterdir() if (p / "manifest.json").is_file()]
    return sorted(runs, key=lambda p: p.name)


def latest_run(root: Path, stage: str) -> Path:
    runs = _completed(root / stage)
    if not runs:
        raise StageError(f"no completed '{stage}' run under {root}; run `zsc {stage}` first")
    return runs[-1]


def _timestamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S.%fZ")


def stage_dir(root: Path, stage: str, overwrite: bool) -> Path:
    if overwrite:
        existing = sorted(p for p in (root / stage).glob("*") if p.is_dir())
        if existing:
            shutil.rmtree(existing[-1])
            existing[-1].mkdir(parents=True)
            return existing[-1]
    out = root / stage / _timestamp()
    while out.exists():
        out = root / stage / _timestamp()
    out.mkdir(parents=True)
    return out


def write_manifest(out: Path, stage: str, cfg: RunConfig, seed: int, started: float,
                   artifacts: dict, inputs: dict) -> Path:
    manifest = {
        "stage": stage,
        "config_hash": cfg.hash(),
        "module_hashes": {m: cfg.hash(*s) for m, s in MODULE_SECTIONS.items()},
        "seed": seed,
        "artifact_version": artifact_version(),
        "duration_s": round(time.perf_counter() - started, 3),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "artifacts": artifacts,
    }
    (out / "config.cfg").write_text(cfg.dump())
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ------------------------------------------------------------------ loading

class Context:
    """Resolved config, run root, and lazily loaded prerequisites for one stage."""

    def __init__(self, cfg: RunConfig, root: Path, seed: int, force: bool = False):
        self.cfg, self.root, self.seed, self.force = cfg, root, seed, force
        self.inputs: dict[str, Path] = {}
        self._bundle: DatasetBundle | None = None

    def path(self, artifact: str, filename: str) -> Path:
        run = latest_run(self.root, PRODUCER[artifact])
        self.inputs[artifact] = run
        return run / filename

    def dataset(self) -> DatasetBundle:
        if self._bundle is None:
            root = self.path("dataset", "dataset")
            manifest = json.loads((root.parent / "manifest.json").read_text())
            want = self.cfg.hash("data")
            if manifest["module_hashes"]["data"] != want and not self.force:
                raise StageError(f"dataset in {root.parent} was generated with a different data "
                                 "config; rerun `zsc synth-data` or pass --force")
            self._bundle = prepare(load_dataset(root), self.cfg)
        return self._bundle

    def model(self, module: str):
        ckpt = self.path(module, f"{module}.ckpt")
        return load_model(ckpt, module, self.cfg.hash(*MODULE_SECTIONS[module]), self.force)

    def models(self, need_counting_vae: bool = True) -> Models:
        cfg = self.cfg
        return Models(self.model("embedding"), self.model("vae"), self.model("counter"),
                      self.model("predictor"), make_provider(cfg.semantic),
                      self.model("counting_vae") if need_counting_vae else None,
                      n_samples=cfg.vae.n_samples, prototype_seed=cfg.vae.seed)


def _save(ctx: Context, out: Path, module: str, model, extra: dict | None = None) -> str:
    name = f"{module}.ckpt"
    save_model(out / name, module, model, ctx.cfg.hash(*MODULE_SECTIONS[module]), ctx.seed, extra)
    return name


# ------------------------------------------------------------------- stages

def stage_synth_data(ctx: Context, out: Path, args) -> dict:
    bundle = generate_synthetic_dataset(SyntheticSpec.from_config(ctx.cfg.data))
    save_dataset(bundle, out / "dataset")
    counts = {s: len(rs) for s, rs in bundle.records.items()}
    print(f"wrote {sum(counts.values())} images ({counts}) to {out / 'dataset'}")
    return {"dataset": "dataset", "images": counts, "classes": bundle.classes}


def stage_train_embed(ctx: Context, out: Path, args) -> dict:
    train = ctx.dataset().split("train")
    net, tlog = train_embedding_network(train, ctx.cfg.embed)
    name = _save(ctx, out, "embedding", net, {"heldout_accuracy": tlog.heldout_accuracy})
    print(f"embedding: held-out accuracy {tlog.heldout_accuracy:.3f}")
    return {"checkpoint": name, "losses": tlog.losses}


def stage_train_counter(ctx: Context, out: Path, args) -> dict:
    train = ctx.dataset().split("train")
    model, tlog = train_base_model(train, ctx.cfg.counter, ctx.cfg.data.sigma)
    name = _save(ctx, out, "counter", model)
    print(f"counter: loss {tlog.initial_loss:.4f} -> {tlog.final_loss:.4f}")
    return {"checkpoint": name, "epoch_losses": tlog.epoch_losses}


def stage_train_vae(ctx: Context, out: Path, args) -> dict:
    cfg = ctx.cfg
    train = ctx.dataset().split("train")
    provider = make_provider(cfg.semantic)
    embed, base = ctx.model("embedding"), ctx.model("counter")
    x, a = vae_training_pairs(embed, train, provider, cfg.vae.seed)
    vae, tlog = train_vae(x, a, cfg.vae)
    xb, ab = counting_space_pairs(base, train, provider)
    cvae, clog = train_vae(xb, ab, cfg.vae, output_activation="none")
    names = [_save(ctx, out, "vae", vae), _save(ctx, out, "counting_vae", cvae)]
    # prototypes of every class, for inspection
    protos = {}
    for c in sorted({r.class_name for rs in ctx.dataset().records.values() for r in rs}):
        p = generate_class_prototype(vae, semantic_embedding(provider, c), cfg.vae.n_samples,
                                     cfg.vae.seed)
        protos[c] = p.vector.tolist()
    (out / "prototypes.json").write_text(json.dumps(protos, sort_keys=True))
    print(f"vae: loss {tlog.epoch_losses[0]:.3f} -> {tlog.epoch_losses[-1]:.3f}; "
          f"counting-space vae: {clog.epoch_losses[0]:.4f} -> {clog.epoch_losses[-1]:.4f}")
    return {"checkpoints": names, "prototypes": "prototypes.json",
            "epoch_losses": tlog.epoch_losses, "counting_epoch_losses": clog.epoch_losses}


def stage_train_predictor(ctx: Context, out: Path, args) -> dict:
    train = ctx.dataset().split("train")
    base = ctx.model("counter")
    pred, tlog = train_error_predictor(base, train, ctx.cfg.predictor, ctx.cfg.selector)
    name = _save(ctx, out, "predictor", pred)
    print(f"predictor: {tlog.n_patches} patches, mse {tlog.epoch_losses[0]:.5f} -> "
          f"{tlog.epoch_losses[-1]:.5f}")
    return {"checkpoint": name, "epoch_losses": tlog.epoch_losses}


def _read_image(path: Path, target_height: int) -> np.ndarray:
    from PIL import Image
    with Image.open(path) as im:
        pixels = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    rec = ImageRecord(pixels=pixels, class_name="", dots=np.zeros((0, 2)), gt_boxes=[],
                      split="test", image_id=path.stem)
    return preprocess_image(rec, target_height).pixels


def stage_infer(ctx: Context, out: Path, args) -> dict:
    if not args.image or not args.class_name:
        raise StageError("infer needs --image and --class")
    cfg = ctx.cfg
    image = _read_image(Path(args.image), cfg.data.target_height)
    models = ctx.models(need_counting_vae=False)
    proposals = FileProposals.from_json(args.proposals) if args.proposals else None
    image_id = Path(args.image).stem
    res = select_exemplars(image, args.class_name, models, cfg.selector, image_id=image_id,
                           proposals=proposals)
    save_density_png(out / "density.png", res.density)
    np.save(out / "density.npy", res.density)
    emit_class_heatmap(image, res.exemplar_boxes, models.embedding, cfg.eval.heatmap_threshold,
                       out / "heatmap.png")
    selection = {"count": res.count, "class": args.class_name,
                 "exemplars": [b.as_list() for b in res.exemplar_boxes],
                 "predicted_errors": [res.candidates[i].predicted_error for i in res.exemplar_indices]}
    (out / "selection.json").write_text(json.dumps(selection, indent=2) + "\n")
    print(f"count: {res.count:.4f}")
    return {"count": res.count, "density": "density.png", "heatmap": "heatmap.png",
            "selection": "selection.json"}


def _metrics_rows(results) -> list[dict]:
    rows = []
    for mode, r in results.items():
        row = {"mode": mode}
        row.update({k: getattr(r.report, k) for k in CSV_FIELDS})
        row["mae_seed_std"] = float(np.std(r.per_seed_mae))
        row["precision"] = "" if r.precision is None else r.precision
        rows.append(row)
    return rows


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def stage_eval(ctx: Context, out: Path, args) -> dict:
    cfg = ctx.cfg
    records = ctx.dataset().split(cfg.eval.split)
    models = ctx.models()
    modes = args.modes.split(",") if args.modes else list(MODES)
    results = evaluate_modes(models, records, cfg.selector, modes, cfg.eval.seeds)
    report = {m: {**json.loads(r.report.to_json()), "per_seed_mae": r.per_seed_mae,
                  "precision": r.precision} for m, r in results.items()}
    (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_csv(out / "metrics.csv", _metrics_rows(results))
    for m, r in results.items():
        print(f"{m:28s} MAE {r.report.mae:7.3f}  RMSE {r.report.rmse:7.3f}")
    return {"metrics": "metrics.json", "table": "metrics.csv", "split": cfg.eval.split,
            "n_images": len(records)}


def run_ablation(axis: str, values: Sequence[int], cfg: RunConfig, models: Models,
                 records: Sequence[ImageRecord], mode: str = "prototype+predictor") -> list[dict]:
    """One evaluation row per value of ``axis``, everything else held fixed."""
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    if not values:
        raise ValueError("empty values list")
    field_name = AXES[axis][0]
    rows = []
    for v in values:
        sel = replace(cfg.selector, **{field_name: int(v)})
        if field_name == "k":
            sel = replace(sel, M=max(sel.M, sel.k))
        sel.validate()
        r = evaluate_modes(models, records, sel, [mode], cfg.eval.seeds)[mode]
        rows.append({"axis": axis, "value": int(v), "mode": mode,
                     **{k: getattr(r.report, k) for k in CSV_FIELDS},
                     "mae_seed_std": float(np.std(r.per_seed_mae))})
    return rows


def stage_ablate(ctx: Context, out: Path, args) -> dict:
    axis = args.axis
    if axis not in AXES:
        raise StageError(f"ablate needs --axis in {sorted(AXES)}")
    values = [int(v) for v in args.values.split(",") if v.strip()] if args.values else \
        list(AXES[axis][1])
    if not values:
        raise StageError("empty --values")
    records = ctx.dataset().split(ctx.cfg.eval.split)
    rows = run_ablation(axis, values, ctx.cfg, ctx.models(need_counting_vae=False), records)
    _write_csv(out / "ablation.csv", rows)
    for row in rows:
        print(f"{axis}={row['value']:<4d} MAE {row['mae']:.3f}")
    return {"table": "ablation.csv", "axis": axis, "values": values}


HANDLERS = {
    "synth-data": stage_synth_data,
    "train-embed": stage_train_embed,
    "train-counter": stage_train_counter,
    "train-vae": stage_train_vae,
    "train-predictor": stage_train_predictor,
    "infer": stage_infer,
    "eval": stage_eval,
    "ablate": stage_ablate,
}


def apply_seed(cfg: RunConfig, seed: int) -> None:
    """``--seed`` reseeds every model and sampler; the dataset keeps ``data.seed``."""
    for section in ("embed", "counter", "vae", "predictor", "selector"):
        setattr(getattr(cfg, section), "seed", seed)
    cfg.eval.seeds = (seed,) + tuple(s for s in cfg.eval.seeds if s != seed)


def run_stage(stage: str, config_path: str | None, overrides: Sequence[str] = (),
              seed: int | None = None, overwrite: bool = False, force: bool = False,
              args: argparse.Namespace | None = None) -> Path:
    if stage not in HANDLERS:
        raise StageError(f"unknown stage {stage!r}")
    cfg = load_config(config_path, list(overrides))
    if seed is not None:
        apply_seed(cfg, seed)
    effective_seed = cfg.embed.seed if seed is None else seed
    root = run_root()
    root.mkdir(parents=True, exist_ok=True)
    args = args or argparse.Namespace(image=None, class_name=None, proposals=None, modes=None,
                                      axis=None, values=None)
    lock = FileLock(str(root / ".zsc.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise StageError(f"another zsc stage is running in {root}") from None
    try:
        torch.manual_seed(effective_seed)
        ctx = Context(cfg, root, effective_seed, force)
        started = time.perf_counter()
        out = stage_dir(root, stage, overwrite)
        try:
            artifacts = HANDLERS[stage](ctx, out, args)
        except BaseException:
            # leave no half-written run that later stages could pick up
            shutil.rmtree(out, ignore_errors=True)
            raise
        write_manifest(out, stage, cfg, effective_seed, started, artifacts, ctx.inputs)
        return out
    finally:
        lock.release()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zsc", description="Zero-shot object counting pipeline.")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. selector.k=10 (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--overwrite", action="store_true",
                   help="replace the newest run of this stage instead of adding a new one")
    p.add_argument("--force", action="store_true",
                   help="load checkpoints even if their config hash differs")
    p.add_argument("--image", help="infer: input image")
    p.add_argument("--class", dest="class_name", help="infer: class name to count")
    p.add_argument("--proposals", help="infer: JSON file of external candidate boxes")
    p.add_argument("--modes", help="eval: comma-separated subset of modes")
    p.add_argument("--axis", choices=sorted(AXES), help="ablate: which setting to sweep")
    p.add_argument("--values", help="ablate: comma-separated values (defaults per axis)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = run_stage(args.stage, args.config, args.overrides, args.seed, args.overwrite,
                        args.force, args)
    except (StageError, ConfigError, CheckpointError, DataError, ValueError, FileNotFoundError) as exc:
        print(f"zsc {args.stage}: error: {exc}", file=sys.stderr)
        return 2
    log.info("artifacts in %s", out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
