"""Synthetic counting data, FSC-147-style annotation I/O, density targets, resizing.

Images are float64 arrays in [0, 1] of shape (H, W, 3). Dots are ``(x, y)``
pixel coordinates with pixel ``c`` covering ``[c, c + 1)``; boxes are
half-open integer rectangles.
"""

from __future__ import annotations

import colorsys
import itertools
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

SPLITS = ("train", "val", "test")
SHAPES = ("disc", "square", "triangle", "ring", "cross", "star")
HUES = ("red", "yellow", "green", "cyan", "blue", "magenta")
TEXTURES = ("solid", "striped", "dotted")


class DataError(ValueError):
    pass


class AnnotationError(DataError):
    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        lines = "\n".join(f"  {img}: {why}" for img, why in problems)
        super().__init__(f"{len(problems)} annotation entries rejected:\n{lines}")


@dataclass(frozen=True)
class BoundingBox:
    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DataError(f"degenerate box {self.as_list()}")

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def contains(self, x: float, y: float) -> bool:
        return self.x1 <= x < self.x2 and self.y1 <= y < self.y2

    def inside(self, height: int, width: int) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width and self.y2 <= height

    def as_list(self) -> list[int]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass
class ImageRecord:
    pixels: np.ndarray
    class_name: str
    dots: np.ndarray
    gt_boxes: list[BoundingBox]
    split: str = "train"
    image_id: str = ""
    # synthetic-only metadata: all target instances, and (class, box) for distractors
    instance_boxes: list[BoundingBox] = field(default_factory=list)
    distractors: list[tuple[str, BoundingBox]] = field(default_factory=list)
    density: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def count(self) -> int:
        return len(self.dots)

    def validate(self) -> None:
        h, w = self.height, self.width
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DataError(f"{self.image_id}: pixels must be HxWx3")
        if self.split not in SPLITS:
            raise DataError(f"{self.image_id}: unknown split {self.split!r}")
        for x, y in self.dots:
            if not (0 <= x < w and 0 <= y < h):
                raise DataError(f"{self.image_id}: dot ({x}, {y}) outside {w}x{h} image")
        for b in self.gt_boxes:
            if not b.inside(h, w):
                raise DataError(f"{self.image_id}: box {b.as_list()} outside {w}x{h} image")

    def density_target(self, sigma: float) -> np.ndarray:
        return render_density_target(self.dots, self.height, self.width, sigma)


@dataclass
class DatasetBundle:
    records: dict[str, list[ImageRecord]]
    classes: dict[str, list[str]]
    rejected: list[tuple[str, str]] = field(default_factory=list)

    def split(self, name: str) -> list[ImageRecord]:
        return self.records.get(name, [])


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 32
    class_split: tuple[int, int, int] = (24, 4, 4)
    images_per_split: tuple[int, int, int] = (240, 60, 60)
    image_size: tuple[int, int] = (96, 128)
    objects_per_image: tuple[int, int] = (3, 12)
    object_scale: tuple[float, float] = (14.0, 22.0)
    distractor_classes_per_image: tuple[int, int] = (1, 2)
    distractors_per_class: tuple[int, int] = (2, 6)
    # instances of one class share a size and shade within an image; these
    # control how much that shared look varies between images
    scale_jitter: float = 0.08
    illumination: tuple[float, float] = (0.7, 1.2)
    seed: int = 0

    def validate(self) -> None:
        for name in ("objects_per_image", "object_scale", "distractor_classes_per_image",
                     "distractors_per_class"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise DataError(f"empty or negative range {name}=({lo}, {hi})")
        if self.objects_per_image[0] < 1:
            raise DataError("objects_per_image must allow at least one object")
        if self.object_scale[0] <= 0:
            raise DataError("object_scale must be positive")
        if not 0 <= self.scale_jitter < 1:
            raise DataError("scale_jitter must be in [0, 1)")
        if not 0 < self.illumination[0] <= self.illumination[1]:
            raise DataError(f"bad illumination range {self.illumination}")
        if sum(self.class_split) != self.num_classes or min(self.class_split) < 1:
            raise DataError(f"class_split {self.class_split} must be positive and sum to "
                            f"num_classes={self.num_classes}")
        if self.class_split[0] < 2:
            raise DataError("need at least two training classes")
        if self.num_classes > len(SHAPES) * len(HUES) * len(TEXTURES):
            raise DataError("more classes requested than attribute combinations exist")
        h, w = self.image_size
        if self.object_scale[1] * (1 + self.scale_jitter) + 2 > min(h, w):
            raise DataError("objects larger than the image")
        if self.distractor_classes_per_image[1] >= min(self.class_split):
            raise DataError("not enough classes per split for the requested distractor classes")

    @classmethod
    def from_config(cls, cfg) -> "SyntheticSpec":
        return cls(
            num_classes=cfg.num_classes,
            class_split=(cfg.train_classes, cfg.val_classes, cfg.test_classes),
            images_per_split=(cfg.train_images, cfg.val_images, cfg.test_images),
            image_size=(cfg.height, cfg.width),
            objects_per_image=(cfg.objects_min, cfg.objects_max),
            object_scale=(float(cfg.object_scale_min), float(cfg.object_scale_max)),
            distractor_classes_per_image=(cfg.distractor_classes_min, cfg.distractor_classes_max),
            distractors_per_class=(cfg.distractors_per_class_min, cfg.distractors_per_class_max),
            scale_jitter=cfg.scale_jitter,
            illumination=(cfg.illumination_min, cfg.illumination_max),
            seed=cfg.seed,
        )


def class_name(hue: str, texture: str, shape: str) -> str:
    return f"{hue}-{texture}-{shape}"


def parse_class_name(name: str) -> tuple[str, str, str]:
    hue, texture, shape = name.split("-")
    return hue, texture, shape


def _choose_classes(spec: SyntheticSpec, rng: np.random.Generator) -> dict[str, list[str]]:
    combos = list(itertools.product(HUES, TEXTURES, SHAPES))
    order = rng.permutation(len(combos))
    combos = [combos[i] for i in order]
    n_train, n_val, n_test = spec.class_split
    train = combos[:n_train]
    seen = [set(c[i] for c in train) for i in range(3)]
    # held-out classes must be new combinations of attributes seen in training
    pool = [c for c in combos[n_train:] if all(c[i] in seen[i] for i in range(3))]
    if len(pool) < n_val + n_test:
        raise DataError("cannot build held-out classes from training attributes; "
                        "use more training classes")
    val, test = pool[:n_val], pool[n_val:n_val + n_test]
    return {s: [class_name(*c) for c in group] for s, group in zip(SPLITS, (train, val, test))}


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.hypot(u, v)
    if shape == "disc":
        return r <= 1.0
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.78
    if shape == "triangle":
        return (v >= -0.55) & (math.sqrt(3) * np.abs(u) + v <= 1.0)
    if shape == "ring":
        return (r <= 1.0) & (r >= 0.55)
    if shape == "cross":
        return ((np.abs(u) <= 0.32) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.32) & (np.abs(u) <= 1.0))
    if shape == "star":
        theta = np.arctan2(v, u)
        return r <= 0.5 + 0.5 * np.cos(5 * theta) ** 2
    raise DataError(f"unknown shape {shape!r}")


def _texture(texture: str, xs: np.ndarray, ys: np.ndarray, angle: float) -> np.ndarray:
    """Brightness multiplier in (0, 1]."""
    if texture == "solid":
        return np.ones_like(xs)
    if texture == "striped":
        t = xs * math.cos(angle) + ys * math.sin(angle)
        return np.where(np.floor(t / 2.5) % 2 == 0, 1.0, 0.35)
    if texture == "dotted":
        cell = 3.5
        fx = (xs / cell) % 1.0 - 0.5
        fy = (ys / cell) % 1.0 - 0.5
        return np.where(fx**2 + fy**2 < 0.09, 0.3, 1.0)
    raise DataError(f"unknown texture {texture!r}")


_SUPERSAMPLE = np.array([-1 / 3, 0.0, 1 / 3])


def _class_look(rng: np.random.Generator) -> tuple[float, float, float]:
    """Per-image (hue shift, saturation, value) shared by a class's instances."""
    return rng.uniform(-0.03, 0.03), rng.uniform(0.55, 0.95), rng.uniform(0.6, 0.95)


def _draw_instance(canvas: np.ndarray, name: str, cx: float, cy: float, radius: float,
                   look: tuple[float, float, float], rng: np.random.Generator) -> BoundingBox:
    hue, texture, shape = parse_class_name(name)
    h, w, _ = canvas.shape
    x0, x1 = max(int(cx - radius) - 1, 0), min(int(cx + radius) + 2, w)
    y0, y1 = max(int(cy - radius) - 1, 0), min(int(cy + radius) + 2, h)
    ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64) + 0.5
    angle = rng.uniform(0, 2 * math.pi)
    ca, sa = math.cos(angle), math.sin(angle)
    cover = np.zeros_like(xs)
    for oy, ox in itertools.product(_SUPERSAMPLE, _SUPERSAMPLE):
        dx, dy = (xs + ox - cx) / radius, (ys + oy - cy) / radius
        u, v = ca * dx + sa * dy, -sa * dx + ca * dy
        cover += _shape_mask(shape, u, v)
    cover /= len(_SUPERSAMPLE) ** 2

    hue_center = HUES.index(hue) / len(HUES)
    dh, sat, val = look
    rgb = np.array(colorsys.hsv_to_rgb((hue_center + dh + rng.uniform(-0.01, 0.01)) % 1.0,
                                       np.clip(sat + rng.uniform(-0.03, 0.03), 0, 1),
                                       np.clip(val + rng.uniform(-0.03, 0.03), 0, 1)))
    shade = _texture(texture, xs - cx, ys - cy, angle)[..., None] * rgb
    alpha = cover[..., None]
    patch = canvas[y0:y1, x0:x1]
    canvas[y0:y1, x0:x1] = (1 - alpha) * patch + alpha * shade

    rows = np.nonzero(cover.max(axis=1) > 0)[0]
    cols = np.nonzero(cover.max(axis=0) > 0)[0]
    return BoundingBox(x0 + int(cols[0]), y0 + int(rows[0]), x0 + int(cols[-1]) + 1,
                       y0 + int(rows[-1]) + 1)


def _background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.3, 0.55)
    tint = rng.uniform(-0.04, 0.04, size=3)
    smooth = gaussian_filter(rng.normal(size=(h, w, 3)), sigma=(8, 8, 0)) * 0.6
    img = base + tint + smooth + rng.normal(scale=0.015, size=(h, w, 3))
    return np.clip(img, 0.0, 1.0)


def _place(radii: list[float], h: int, w: int, rng: np.random.Generator):
    centers: list[tuple[float, float]] = []
    for r in radii:
        for _ in range(400):
            cx, cy = rng.uniform(r, w - r), rng.uniform(r, h - r)
            if all(math.hypot(cx - px, cy - py) >= r + pr + 1.0
                   for (px, py), pr in zip(centers, radii)):
                centers.append((cx, cy))
                break
        else:
            return None
    return centers


def _make_image(spec: SyntheticSpec, split: str, index: int, target: str,
                split_classes: list[str]) -> ImageRecord:
    rng = np.random.default_rng([spec.seed, SPLITS.index(split), index])
    h, w = spec.image_size
    others = [c for c in split_classes if c != target]
    for _ in range(50):
        n_target = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
        n_dc = int(rng.integers(spec.distractor_classes_per_image[0],
                                spec.distractor_classes_per_image[1] + 1))
        dclasses = [others[i] for i in rng.choice(len(others), size=n_dc, replace=False)]
        names = [target] * n_target
        for dc in dclasses:
            names += [dc] * int(rng.integers(spec.distractors_per_class[0],
                                             spec.distractors_per_class[1] + 1))
        base_size = {c: rng.uniform(*spec.object_scale) for c in [target] + dclasses}
        j = spec.scale_jitter
        radii = [base_size[n] * rng.uniform(1 - j, 1 + j) / 2 for n in names]
        centers = _place(radii, h, w, rng)
        if centers is not None:
            break
    else:
        raise DataError(f"could not place objects for {split}/{index}; image too crowded")

    canvas = _background(h, w, rng)
    looks = {c: _class_look(rng) for c in [target] + dclasses}
    boxes = [_draw_instance(canvas, n, cx, cy, r, looks[n], rng)
             for n, (cx, cy), r in zip(names, centers, radii)]
    canvas = np.clip(canvas * rng.uniform(*spec.illumination), 0.0, 1.0)
    pixels = np.round(canvas * 255.0).astype(np.uint8).astype(np.float64) / 255.0

    target_boxes = boxes[:n_target]
    pick = sorted(rng.choice(n_target, size=min(3, n_target), replace=False).tolist())
    return ImageRecord(
        pixels=pixels,
        class_name=target,
        dots=np.array(centers[:n_target], dtype=np.float64).reshape(-1, 2),
        gt_boxes=[target_boxes[i] for i in pick],
        split=split,
        image_id=f"{split}_{index:05d}.png",
        instance_boxes=target_boxes,
        distractors=list(zip(names[n_target:], boxes[n_target:])),
    )


def generate_synthetic_dataset(spec: SyntheticSpec) -> DatasetBundle:
    """Render a deterministic FSC-147-like dataset with class-disjoint splits."""
    spec.validate()
    classes = _choose_classes(spec, np.random.default_rng([spec.seed, 99]))
    records = {}
    for split, n_images in zip(SPLITS, spec.images_per_split):
        names = classes[split]
        records[split] = [_make_image(spec, split, i, names[i % len(names)], names)
                          for i in range(n_images)]
    return DatasetBundle(records=records, classes=classes)


def render_density_target(dots, height: int, width: int, sigma: float) -> np.ndarray:
    """Sum of per-dot Gaussians, each truncated at 4 sigma and renormalized to 1."""
    if sigma <= 0:
        raise DataError(f"sigma must be positive, got {sigma}")
    out = np.zeros((height, width), dtype=np.float64)
    radius = 4.0 * sigma
    for x, y in np.asarray(dots, dtype=np.float64).reshape(-1, 2):
        if not (0 <= x < width and 0 <= y < height):
            raise DataError(f"dot ({x}, {y}) outside {width}x{height} image")
        cols = np.arange(max(math.floor(x - radius), 0), min(math.ceil(x + radius) + 1, width))
        rows = np.arange(max(math.floor(y - radius), 0), min(math.ceil(y + radius) + 1, height))
        cols = cols[np.abs(cols + 0.5 - x) <= radius]
        rows = rows[np.abs(rows + 0.5 - y) <= radius]
        dx, dy = cols + 0.5 - x, rows + 0.5 - y
        kernel = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2 * sigma**2))
        total = kernel.sum()
        if total == 0.0:
            # sigma far below a pixel: all mass on the containing pixel
            out[int(y), int(x)] += 1.0
            continue
        out[np.ix_(rows, cols)] += kernel / total
    return out


def _overlap_matrix(n_out: int, n_in: int) -> np.ndarray:
    """A[i, j] = overlap of output cell i with input cell j, in input-cell units."""
    scale = n_in / n_out
    edges_out = np.arange(n_out + 1) * scale
    lo = np.maximum(edges_out[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges_out[1:, None], np.arange(n_in)[None, :] + 1)
    return np.clip(hi - lo, 0.0, None)


def resize_density(density: np.ndarray, height: int, width: int) -> np.ndarray:
    """Area-weighted resampling; conserves the total mass."""
    a_h = _overlap_matrix(height, density.shape[0])
    a_w = _overlap_matrix(width, density.shape[1])
    return a_h @ density @ a_w.T


def resize_pixels(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)))[None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False,
                        antialias=True)
    return out[0].numpy().transpose(1, 2, 0).clip(0.0, 1.0)


def _scale_box(b: BoundingBox, sx: float, sy: float, h: int, w: int) -> BoundingBox:
    x1, y1 = math.floor(b.x1 * sx), math.floor(b.y1 * sy)
    x2 = min(max(math.ceil(b.x2 * sx), x1 + 1), w)
    y2 = min(max(math.ceil(b.y2 * sy), y1 + 1), h)
    return BoundingBox(min(x1, x2 - 1), min(y1, y2 - 1), x2, y2)


def preprocess_image(record: ImageRecord, target_height: int) -> ImageRecord:
    """Resize to a fixed height keeping aspect ratio; rescale all annotations."""
    if target_height <= 0:
        raise DataError(f"target_height must be positive, got {target_height}")
    h, w = record.height, record.width
    if h == target_height:
        return record
    new_w = max(1, int(round(w * target_height / h)))
    sx, sy = new_w / w, target_height / h
    box = lambda b: _scale_box(b, sx, sy, target_height, new_w)  # noqa: E731
    dots = record.dots * np.array([sx, sy])
    dots = np.minimum(dots, np.nextafter(np.array([new_w, target_height], dtype=float), 0))
    return replace(
        record,
        pixels=resize_pixels(record.pixels, target_height, new_w),
        dots=dots,
        gt_boxes=[box(b) for b in record.gt_boxes],
        instance_boxes=[box(b) for b in record.instance_boxes],
        distractors=[(c, box(b)) for c, b in record.distractors],
        density=None if record.density is None
        else resize_density(record.density, target_height, new_w),
    )


# ---------------------------------------------------------------- persistence

def _record_entry(r: ImageRecord) -> dict:
    return {
        "class_name": r.class_name,
        "split": r.split,
        "points": r.dots.tolist(),
        "boxes": [b.as_list() for b in r.gt_boxes],
        "instances": [b.as_list() for b in r.instance_boxes],
        "distractors": [[c, b.as_list()] for c, b in r.distractors],
    }


def save_dataset(bundle: DatasetBundle, root: str | Path) -> Path:
    """Write ``<root>/{images/, annotations/annotations.json, manifest.json}``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(exist_ok=True)
    annotations = {}
    for split in SPLITS:
        for r in bundle.split(split):
            img = np.round(r.pixels * 255.0).astype(np.uint8)
            Image.fromarray(img, mode="RGB").save(root / "images" / r.image_id)
            annotations[r.image_id] = _record_entry(r)
    (root / "annotations" / "annotations.json").write_text(
        json.dumps(annotations, indent=1, sort_keys=True))
    manifest = {
        "splits": {s: [r.image_id for r in bundle.split(s)] for s in SPLITS},
        "classes": bundle.classes,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def _parse_entry(image_id: str, entry: dict, images_dir: Path, split: str) -> ImageRecord:
    if not isinstance(entry, dict) or "class_name" not in entry or "points" not in entry:
        raise DataError("malformed entry: needs class_name and points")
    path = images_dir / image_id
    if not path.is_file():
        raise DataError(f"missing image file {path}")
    pixels = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8).astype(np.float64) / 255.0
    try:
        dots = np.array(entry["points"], dtype=np.float64).reshape(-1, 2)
        boxes = [BoundingBox(*map(int, b)) for b in entry.get("boxes", [])]
        instances = [BoundingBox(*map(int, b)) for b in entry.get("instances", [])]
        distractors = [(str(c), BoundingBox(*map(int, b))) for c, b in entry.get("distractors", [])]
    except (TypeError, ValueError) as exc:
        raise DataError(f"malformed entry: {exc}") from exc
    record = ImageRecord(pixels=pixels, class_name=str(entry["class_name"]), dots=dots,
                         gt_boxes=boxes, split=entry.get("split", split), image_id=image_id,
                         instance_boxes=instances, distractors=distractors)
    record.validate()
    return record


def load_annotations(annotation_path: str | Path, images_dir: str | Path,
                     manifest_path: str | Path | None = None, strict: bool = False
                     ) -> DatasetBundle:
    """Load an FSC-147-style annotation JSON into a bundle.

    Entries that fail validation are collected in ``bundle.rejected`` as
    ``(image_id, reason)``; with ``strict=True`` they raise AnnotationError.
    """
    annotations = json.loads(Path(annotation_path).read_text())
    if not isinstance(annotations, dict):
        raise AnnotationError([(str(annotation_path), "top level must be an object")])
    split_of: dict[str, str] = {}
    classes: dict[str, list[str]] = {s: [] for s in SPLITS}
    if manifest_path is not None:
        manifest = json.loads(Path(manifest_path).read_text())
        for s, ids in manifest.get("splits", {}).items():
            split_of.update({i: s for i in ids})
        classes.update(manifest.get("classes", {}))
    records: dict[str, list[ImageRecord]] = {s: [] for s in SPLITS}
    rejected = []
    for image_id in sorted(annotations):
        try:
            r = _parse_entry(image_id, annotations[image_id], Path(images_dir),
                             split_of.get(image_id, "train"))
        except DataError as exc:
            rejected.append((image_id, str(exc)))
            continue
        records[r.split].append(r)
    if strict and rejected:
        raise AnnotationError(rejected)
    for s in SPLITS:
        if not classes[s]:
            classes[s] = sorted({r.class_name for r in records[s]})
    if split_of:
        order = {i: n for n, i in enumerate(
            i for s in SPLITS for i in json.loads(Path(manifest_path).read_text())["splits"].get(s, []))}
        for s in SPLITS:
            records[s].sort(key=lambda r: order.get(r.image_id, len(order)))
    return DatasetBundle(records=records, classes=classes, rejected=rejected)


def load_dataset(root: str | Path, strict: bool = True) -> DatasetBundle:
    root = Path(root)
    return load_annotations(root / "annotations" / "annotations.json", root / "images",
                            root / "manifest.json", strict=strict)


def records_equal(a: ImageRecord, b: ImageRecord) -> bool:
    return (a.image_id == b.image_id and a.class_name == b.class_name and a.split == b.split
            and np.array_equal(a.pixels, b.pixels) and np.array_equal(a.dots, b.dots)
            and a.gt_boxes == b.gt_boxes and a.instance_boxes == b.instance_boxes
            and a.distractors == b.distractors)
