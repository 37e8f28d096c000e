"""Run configuration: one dataclass per namespace, flat ``namespace.key=value`` files."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    num_classes: int = 32
    train_images: int = 240
    val_images: int = 60
    test_images: int = 60
    train_classes: int = 24
    val_classes: int = 4
    test_classes: int = 4
    height: int = 96
    width: int = 128
    objects_min: int = 3
    objects_max: int = 12
    object_scale_min: int = 14
    object_scale_max: int = 22
    distractor_classes_min: int = 1
    distractor_classes_max: int = 2
    distractors_per_class_min: int = 2
    distractors_per_class_max: int = 6
    scale_jitter: float = 0.08
    illumination_min: float = 0.7
    illumination_max: float = 1.2
    sigma: float = 2.0
    target_height: int = 96
    seed: int = 0


@dataclass
class SemanticConfig:
    mode: str = "compositional"  # compositional | hashed | file
    dim: int = 512
    path: str = ""
    seed: int = 0


@dataclass
class EmbedConfig:
    embedding_dim: int = 64
    patch_size: int = 32
    widths: tuple[int, ...] = (16, 32, 64, 64)
    epochs: int = 24
    batch_size: int = 64
    lr: float = 2e-3
    background_fraction: float = 0.2
    seed: int = 0


@dataclass
class CounterConfig:
    backbone_widths: tuple[int, ...] = (16, 32, 64)
    reduced_channels: int = 32
    head_widths: tuple[int, ...] = (64, 32, 16, 16)
    exemplar_size: int = 32
    density_scale: float = 100.0
    n_exemplars: int = 3
    epochs: int = 40
    batch_size: int = 8
    lr: float = 5e-4
    weight_decay: float = 1e-4
    seed: int = 0


@dataclass
class VAEConfig:
    latent_dim: int = 64
    hidden: int = 256
    epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-3
    n_samples: int = 256
    seed: int = 0


@dataclass
class PredictorConfig:
    widths: tuple[int, ...] = (32, 32, 32, 32)
    patches_per_image: int = 40
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    normalized: bool = True
    flip: bool = True
    seed: int = 0


@dataclass
class SelectorConfig:
    M: int = 450
    k: int = 10
    s: int = 3
    size_min: int = 14
    size_max: int = 40
    seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.s <= self.k <= self.M:
            raise ConfigError(f"need 1 <= s <= k <= M, got s={self.s} k={self.k} M={self.M}")
        if not 1 <= self.size_min <= self.size_max:
            raise ConfigError(f"bad size range [{self.size_min}, {self.size_max}]")


@dataclass
class EvalConfig:
    split: str = "val"
    seeds: tuple[int, ...] = (0, 1, 2)
    heatmap_threshold: float = 0.5


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    semantic: SemanticConfig = field(default_factory=SemanticConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    counter: CounterConfig = field(default_factory=CounterConfig)
    vae: VAEConfig = field(default_factory=VAEConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def set(self, key: str, value: str) -> None:
        section, _, name = key.partition(".")
        if not name or section not in _sections():
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(self, section)
        types = typing.get_type_hints(type(obj))
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(obj, name, _coerce(value, types[name], key))

    def flat(self) -> dict[str, object]:
        out = {}
        for section in _sections():
            for k, v in dataclasses.asdict(getattr(self, section)).items():
                out[f"{section}.{k}"] = list(v) if isinstance(v, tuple) else v
        return out

    def hash(self, *sections: str) -> str:
        """Stable digest over the given namespaces or single keys (everything by default)."""
        flat = self.flat()
        keep = sections or _sections()
        sub = {k: v for k, v in flat.items() if k.split(".")[0] in keep or k in keep}
        blob = json.dumps(sub, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> None:
        self.selector.validate()
        d = self.data
        if d.train_classes + d.val_classes + d.test_classes > d.num_classes:
            raise ConfigError("split class counts exceed data.num_classes")
        if self.semantic.mode not in ("compositional", "hashed", "file"):
            raise ConfigError(f"unknown semantic.mode {self.semantic.mode!r}")
        if self.semantic.mode == "file" and not self.semantic.path:
            raise ConfigError("semantic.mode=file needs semantic.path")
        if self.eval.split not in ("train", "val", "test"):
            raise ConfigError(f"bad eval.split {self.eval.split!r}")
        if self.counter.n_exemplars < 1:
            raise ConfigError("counter.n_exemplars must be >= 1")

    def dump(self) -> str:
        return "".join(f"{k}={_render(v)}\n" for k, v in self.flat().items())


def _sections() -> tuple[str, ...]:
    return tuple(f.name for f in dataclasses.fields(RunConfig))


def _render(v) -> str:
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(raw: str, tp, key: str):
    raw = raw.strip()
    try:
        if tp is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp in (int, float, str):
            return tp(raw)
        if typing.get_origin(tp) is tuple:
            (inner, _) = typing.get_args(tp)
            return tuple(inner(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"unsupported type for {key}")


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        cfg.set(k.strip(), v)
    return cfg


def load_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parse_config_text(Path(path).read_text(), cfg)
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override must be key=value, got {ov!r}")
        k, v = ov.split("=", 1)
        cfg.set(k.strip(), v)
    cfg.validate()
    return cfg
