"""Run configuration: architecture, optimizer, schedule and data settings in one JSON-able record."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .network import BlockVariant, CascadeSpec

CROP_POLICIES = ("random", "center", "tumor")


@dataclass
class RunConfig:
    # architecture
    levels: int = 5
    base_filters: int = 16
    block: str = "plain"
    with_se: bool = False
    patch_shape: tuple[int, int, int] = (80, 96, 64)
    padding: str = "replicate"
    detach_cascade: bool = False
    # optimizer
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    dice_eps: float = 1e-5
    # schedule
    drop_factor: float = 0.2
    drop_patience: int = 6
    stop_patience: int = 15
    epochs: int = 200
    max_steps: int | None = None
    batch_size: int = 4
    # data
    augment: bool = True
    crop_policy: str = "random"
    normalization: str = "nonzero"
    seed: int = 0
    fold: int = 0
    n_folds: int = 5
    data_dir: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        self.patch_shape = tuple(int(s) for s in self.patch_shape)
        if len(self.patch_shape) != 3:
            raise ConfigError(f"patch_shape needs 3 entries, got {self.patch_shape}")
        if self.crop_policy not in CROP_POLICIES:
            raise ConfigError(f"crop_policy must be one of {CROP_POLICIES}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if not 0 <= self.fold < self.n_folds:
            raise ConfigError(f"fold {self.fold} outside 0..{self.n_folds - 1}")
        if "+" in self.block:
            variant = BlockVariant.parse(self.block)
            self.block, self.with_se = variant.kind.value, self.with_se or variant.with_se
        self.variant  # validates the block name

    @property
    def variant(self) -> BlockVariant:
        try:
            return BlockVariant.parse(self.block + ("+se" if self.with_se else ""))
        except ValueError as exc:
            raise ConfigError(f"unknown block kind {self.block!r}") from exc

    def cascade_spec(self) -> CascadeSpec:
        return CascadeSpec.uniform(self.levels, self.base_filters, self.patch_shape, self.variant,
                                   self.padding, self.detach_cascade)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_shape"] = list(self.patch_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def overrides(self) -> dict:
        """Fields that differ from the defaults."""
        base = RunConfig().to_dict()
        return {k: v for k, v in self.to_dict().items() if base[k] != v}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)
