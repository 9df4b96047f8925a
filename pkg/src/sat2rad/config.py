"""Run configuration: a YAML file with sections, plus dotted-path overrides.

Every command snapshots the effective config next to its outputs, so any
table or figure can be reproduced from the snapshot and the seed alone.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import SyntheticStormSpec
from .errors import ConfigurationError

CKPT_DIR_ENV = "SAT2RAD_CKPT_DIR"


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" | "archive"
    archive_path: str | None = None
    n_events: int = 16
    seed: int = 0
    height: int = 64
    width: int = 64
    min_cells: int = 2
    max_cells: int = 5
    amp_max: float = 250.0
    split_fractions: tuple[float, float, float] = (0.5, 0.25, 0.25)
    split_seed: int = 0

    def storm_spec(self) -> SyntheticStormSpec:
        return SyntheticStormSpec(
            seed=self.seed,
            height=self.height,
            width=self.width,
            min_cells=self.min_cells,
            max_cells=self.max_cells,
            amp_range=(60.0, self.amp_max),
        )


@dataclass
class ModelConfig:
    widths: tuple[int, int] = (32, 64)
    heads: int = 4
    window: int = 8
    basis: str = "haar-orthonormal"
    use_wtf: bool = True
    use_vis: bool = True


@dataclass
class LossConfig:
    alpha_mode: str = "fixed"  # "fixed" | "energy"
    alpha: float = 1.0
    alpha_min: float = 0.1
    alpha_max: float = 10.0
    w_lh: float = 1.0 / 3.0
    w_hl: float = 1.0 / 3.0
    w_hh: float = 1.0 / 3.0
    lambda_freq: float = 0.1
    direction: str = "as_described"


@dataclass
class DiffusionConfig:
    t_steps: int = 1000
    schedule: str = "linear"  # "linear" | "cosine"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sampler_steps: int = 50
    residual: bool = False
    widths: tuple[int, int] = (32, 64)
    cond_width: int = 16
    lr: float | None = None  # falls back to run.lr
    use_dedr: bool = True
    use_hlf: bool = True


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 200
    batch_size: int = 8
    lr: float = 2e-4
    grad_clip: float = 1.0
    checkpoint_dir: str = field(
        default_factory=lambda: os.environ.get(CKPT_DIR_ENV, "checkpoints")
    )


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    run: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        for section_field in fields(cls):
            section = d.get(section_field.name)
            if section is None:
                continue
            if not isinstance(section, dict):
                raise ConfigurationError(
                    f"config section {section_field.name!r} must be a mapping"
                )
            target = getattr(cfg, section_field.name)
            known = {f.name: f for f in fields(target)}
            for key, value in section.items():
                if key not in known:
                    raise ConfigurationError(
                        f"unknown config key {section_field.name}.{key}"
                    )
                current = getattr(target, key)
                setattr(target, key, _coerce(current, value, f"{section_field.name}.{key}"))
        return cfg

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigurationError(f"config root must be a mapping: {path}")
        return cls.from_dict(raw)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def snapshot(self, out_dir, name: str = "config.snapshot.yaml") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / name
        path.write_text(self.to_yaml())
        return path

    def apply_overrides(self, overrides) -> "RunConfig":
        """Apply ``section.key=value`` strings in place; returns self."""
        for item in overrides or []:
            if "=" not in item:
                raise ConfigurationError(f"override must be section.key=value: {item!r}")
            dotted, value = item.split("=", 1)
            parts = dotted.split(".")
            if len(parts) != 2:
                raise ConfigurationError(f"override path must be section.key: {dotted!r}")
            section_name, key = parts
            if not hasattr(self, section_name):
                raise ConfigurationError(f"unknown config section {section_name!r}")
            section = getattr(self, section_name)
            if not hasattr(section, key):
                raise ConfigurationError(f"unknown config key {dotted!r}")
            current = getattr(section, key)
            setattr(section, key, _coerce(current, _parse_scalar(value), dotted))
        return self


def _parse_scalar(text: str):
    return yaml.safe_load(text)


def _coerce(current, value, where: str):
    """Coerce a parsed value to the type of the current field value."""
    if value is None:
        return None
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        raise ConfigurationError(f"{where} expects a boolean, got {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, int):
            return int(value)
        raise ConfigurationError(f"{where} expects an integer, got {value!r}")
    if isinstance(current, float):
        if isinstance(value, (int, float)):
            return float(value)
        raise ConfigurationError(f"{where} expects a number, got {value!r}")
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v != ""]
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where} expects a sequence, got {value!r}")
        kind = float if any(isinstance(v, float) for v in current) else int
        return tuple(kind(_parse_scalar(str(v))) for v in value)
    if current is None:
        return value  # optional field: trust the parsed YAML type
    if isinstance(current, str):
        return value if isinstance(value, str) else str(value)
    raise ConfigurationError(f"{where}: unsupported config field type")
