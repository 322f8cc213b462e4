"""Run configuration: one TOML file drives generate, train, eval and predict.

Example::

    seed = 0
    output_dir = "runs/desk"

    [data]
    root = "data/desk"
    classes = ["scratch", "welding_line", "inclusion"]
    counts = { train = 600, val = 100, test = 100 }

    [model]
    encoder = "vit"            # or "passthrough" for the no-transformer ablation
    patch_size = 8

    [optim]
    epochs = 30
    batch_size = 16

Every key is optional; see the dataclasses below for defaults.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .anchors import build_anchor_grid
from .data import GenConfig
from .model import HeadConfig
from .vit import ConfigError, ViTConfig


@dataclass
class DataSection:
    root: str = "data/desk"
    image_size: int = 64
    classes: list[str] = field(default_factory=lambda: ["scratch", "welding_line", "inclusion"])
    defects_per_image: list[int] = field(default_factory=lambda: [1, 4])
    overlap_allowed: bool = True
    max_overlap_iou: float = 0.3
    noise_level: float = 0.02
    counts: dict[str, int] = field(default_factory=lambda: {"train": 600, "val": 100, "test": 100})
    augment: bool = True


@dataclass
class ModelSection:
    encoder: str = "vit"
    patch_size: int = 8
    embed_dim: int = 32
    num_heads: int = 4
    num_layers: int = 2
    mlp_ratio: float = 2.0
    vit_dropout: float = 0.1
    cnn_channels: list[int] = field(default_factory=lambda: [64, 32])
    cnn_kernel: int = 3
    mlp_hidden: list[int] = field(default_factory=lambda: [256])
    head_dropout: float = 0.1
    num_classes: int | None = None
    num_anchors: int | None = None


@dataclass
class AnchorSection:
    stride: int = 16
    scales: list[float] = field(default_factory=lambda: [12.0, 24.0, 40.0])
    ratios: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    upper: float = 0.6
    lower: float = 0.3
    score_threshold: float = 0.5
    nms_iou: float = 0.5


@dataclass
class LossSection:
    weight: float = 1.0
    normalize_cce: bool = True


@dataclass
class OptimSection:
    lr: float = 1e-3
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 16


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/desk"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    anchors: AnchorSection = field(default_factory=AnchorSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)

    def __post_init__(self):
        self.validate()

    # -- derived objects -------------------------------------------------------
    @property
    def num_classes(self) -> int:
        return len(self.data.classes) + 1

    def gen_config(self) -> GenConfig:
        d = self.data
        return GenConfig(image_size=d.image_size, classes=tuple(d.classes),
                         defects_per_image=tuple(d.defects_per_image), overlap_allowed=d.overlap_allowed,
                         max_overlap_iou=d.max_overlap_iou, noise_level=d.noise_level, seed=self.seed)

    def vit_config(self) -> ViTConfig:
        m = self.model
        return ViTConfig(image_size=self.data.image_size, patch_size=m.patch_size, embed_dim=m.embed_dim,
                         num_heads=m.num_heads, num_layers=m.num_layers, mlp_ratio=m.mlp_ratio,
                         dropout_rate=m.vit_dropout, channels=1)

    def grid(self):
        a = self.anchors
        return build_anchor_grid(self.data.image_size, a.stride, a.scales, a.ratios)

    def head_config(self) -> HeadConfig:
        m = self.model
        return HeadConfig(num_anchors=len(self.grid()), num_classes=self.num_classes,
                          cnn_channels=tuple(m.cnn_channels), cnn_kernel=m.cnn_kernel,
                          mlp_hidden=tuple(m.mlp_hidden), dropout_rate=m.head_dropout)

    def validate(self) -> None:
        self.gen_config()
        self.vit_config()
        grid = self.grid()
        if self.model.num_anchors is not None and self.model.num_anchors != len(grid):
            raise ConfigError(f"model.num_anchors={self.model.num_anchors} but the anchor grid has {len(grid)} anchors")
        if self.model.num_classes is not None and self.model.num_classes != self.num_classes:
            raise ConfigError(f"model.num_classes={self.model.num_classes} but data declares "
                              f"{len(self.data.classes)} classes + background = {self.num_classes}")
        if self.model.encoder not in ("vit", "passthrough"):
            raise ConfigError(f"model.encoder must be 'vit' or 'passthrough', got {self.model.encoder!r}")
        if not 0.0 <= self.anchors.lower < self.anchors.upper <= 1.0:
            raise ConfigError("anchors.lower must be < anchors.upper, both in [0, 1]")
        if self.optim.epochs < 0 or self.optim.batch_size < 1:
            raise ConfigError("optim.epochs must be >= 0 and optim.batch_size >= 1")
        self.head_config()

    # -- (de)serialisation ----------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = {"data": DataSection, "model": ModelSection, "anchors": AnchorSection,
                    "loss": LossSection, "optim": OptimSection}
        top = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - top
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in d.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ConfigError(f"[{key}] must be a table")
                names = {f.name for f in dataclasses.fields(sections[key])}
                bad = set(value) - names
                if bad:
                    raise ConfigError(f"unknown keys in [{key}]: {sorted(bad)}")
                kwargs[key] = sections[key](**value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    def overfit_mode(self, epochs: int = 300) -> "RunConfig":
        """Memorisation sanity setting: same model, augmentation off, long schedule."""
        return self.replace(data__augment=False, optim__epochs=epochs)

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        for dotted, value in changes.items():
            parts = dotted.split("__")
            target = d
            for p in parts[:-1]:
                target = target[p]
            target[parts[-1]] = value
        return RunConfig.from_dict(d)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return RunConfig.from_dict(raw)


def dump_toml(cfg: RunConfig) -> str:
    """Minimal TOML writer for the flat section layout used here."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        if isinstance(v, dict):
            return "{ " + ", ".join(f"{k} = {fmt(x)}" for k, x in v.items()) + " }"
        return repr(v)

    d = cfg.to_dict()
    lines = [f"{k} = {fmt(v)}" for k, v in d.items() if not isinstance(v, dict)]
    for k, v in d.items():
        if isinstance(v, dict):
            lines.append(f"\n[{k}]")
            lines.extend(f"{kk} = {fmt(vv)}" for kk, vv in v.items() if vv is not None)
    return "\n".join(lines) + "\n"
