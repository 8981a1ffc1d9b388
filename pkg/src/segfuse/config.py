"""Experiment configuration: one JSON document for every pipeline stage.

Unknown keys are rejected so a typo fails at load time instead of silently
falling back to a default. The top-level ``seed`` drives the scene generator
and every model's initialisation and sampling.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from segfuse.cycletrack import CycleConfig
from segfuse.errors import ConfigError
from segfuse.fusion import FusionConfig
from segfuse.segnet import SegNetConfig
from segfuse.synthdata import SceneConfig

MODEL_ROWS = ("segnet", "unsupervised", "weighted_mean", "fusion")


def _strict(cls, data: Any, where: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return dict(data)


def _positive(where: str, **values) -> None:
    for name, v in values.items():
        if v is None or v < 1:
            raise ConfigError(f"{where}.{name} must be >= 1, got {v}")


def _rate(where: str, value: float) -> None:
    if not value > 0:
        raise ConfigError(f"{where}.lr must be positive, got {value}")


def _desk_scene() -> SceneConfig:
    return SceneConfig(image_size=64, n_fruits=(1, 4), fruit_radius=(5.0, 11.0), motion_amplitude=1.5,
                       clip_length=30)


@dataclass(frozen=True)
class DatasetSection:
    scene: SceneConfig = field(default_factory=_desk_scene)
    n_train_images: int = 120
    n_val_images: int = 31
    n_unlabelled_clips: int = 24
    n_test_clips: int = 4
    frame_stride: int = 5

    def validate(self) -> None:
        _positive("dataset", n_train_images=self.n_train_images, n_val_images=self.n_val_images,
                  n_unlabelled_clips=self.n_unlabelled_clips, n_test_clips=self.n_test_clips,
                  frame_stride=self.frame_stride)

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetSection":
        d = _strict(cls, data, "dataset")
        if "scene" in d:
            scene = _strict(SceneConfig, d["scene"], "dataset.scene")
            d["scene"] = replace(_desk_scene(), **scene)
        return cls(**d)


@dataclass(frozen=True)
class SegSection:
    model: SegNetConfig = field(default_factory=lambda: SegNetConfig(base_channels=8, depth=3, input_size=64))
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    threshold: float = 0.5

    def validate(self) -> None:
        _positive("segnet", batch_size=self.batch_size)
        if self.epochs < 0:
            raise ConfigError(f"segnet.epochs must be >= 0, got {self.epochs}")
        _rate("segnet", self.lr)
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"segnet.threshold must lie in (0, 1), got {self.threshold}")

    @classmethod
    def from_dict(cls, data: dict) -> "SegSection":
        d = _strict(cls, data, "segnet")
        if "model" in d:
            d["model"] = SegNetConfig.from_dict({**asdict(cls().model), **_strict(SegNetConfig, d["model"], "segnet.model")})
        return cls(**d)


@dataclass(frozen=True)
class CycleSection:
    model: CycleConfig = field(default_factory=lambda: CycleConfig(input_size=64, channels=32, depth=1, patch_size=20,
                                                                      refine_layers=0))
    steps: int = 500
    lr: float = 2e-4
    momentum: float = 0.9
    grad_clip: Optional[float] = 1.0
    windows_per_step: int = 2
    smooth_window: int = 50

    def validate(self) -> None:
        _positive("cycle", windows_per_step=self.windows_per_step, smooth_window=self.smooth_window)
        if self.steps < 0:
            raise ConfigError(f"cycle.steps must be >= 0, got {self.steps}")
        _rate("cycle", self.lr)
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"cycle.momentum must lie in [0, 1), got {self.momentum}")
        if self.grad_clip is not None and not (isinstance(self.grad_clip, (int, float)) and self.grad_clip > 0):
            raise ConfigError(f"cycle.grad_clip must be a positive number or null, got {self.grad_clip!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "CycleSection":
        d = _strict(cls, data, "cycle")
        if "model" in d:
            d["model"] = CycleConfig.from_dict({**asdict(cls().model), **_strict(CycleConfig, d["model"], "cycle.model")})
        return cls(**d)


@dataclass(frozen=True)
class FusionSection:
    model: FusionConfig = field(default_factory=lambda: FusionConfig(input_size=64, token_grid=16, token_dim=32))
    epochs: int = 20
    batch_size: int = 4
    lr: float = 3e-3
    frame_step: int = 1
    augment: bool = True
    alpha: float = 0.5

    def validate(self) -> None:
        _positive("fusion", batch_size=self.batch_size, frame_step=self.frame_step)
        if self.epochs < 0:
            raise ConfigError(f"fusion.epochs must be >= 0, got {self.epochs}")
        _rate("fusion", self.lr)
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"fusion.alpha must lie in [0, 1], got {self.alpha}")
        if not isinstance(self.augment, bool):
            raise ConfigError(f"fusion.augment must be true or false, got {self.augment!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "FusionSection":
        d = _strict(cls, data, "fusion")
        if "model" in d:
            d["model"] = FusionConfig.from_dict({**asdict(cls().model), **_strict(FusionConfig, d["model"], "fusion.model")})
        return cls(**d)


@dataclass(frozen=True)
class EvaluateSection:
    models: Tuple[str, ...] = MODEL_ROWS
    oracle_first_frame: bool = False

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))

    def validate(self) -> None:
        if not self.models:
            raise ConfigError("evaluate.models is empty; name at least one of " + ", ".join(MODEL_ROWS))
        unknown = [m for m in self.models if m not in MODEL_ROWS]
        if unknown:
            raise ConfigError(f"unknown model row(s) {unknown}; choose from {', '.join(MODEL_ROWS)}")
        if len(set(self.models)) != len(self.models):
            raise ConfigError(f"evaluate.models lists a row twice: {list(self.models)}")

    @classmethod
    def from_dict(cls, data: dict) -> "EvaluateSection":
        return cls(**_strict(cls, data, "evaluate"))


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/desk"
    force: bool = False
    dataset: DatasetSection = field(default_factory=DatasetSection)
    segnet: SegSection = field(default_factory=SegSection)
    cycle: CycleSection = field(default_factory=CycleSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        for section in (self.dataset, self.segnet, self.cycle, self.fusion, self.evaluate):
            section.validate()
        size = self.dataset.scene.image_size
        for name, cfg in (("segnet", self.segnet.model), ("cycle", self.cycle.model), ("fusion", self.fusion.model)):
            if cfg.input_size != size:
                raise ConfigError(f"{name}.model.input_size {cfg.input_size} differs from the scene image_size {size}")
        if self.cycle.model.cycle_len + 1 > self.dataset.scene.clip_length:
            raise ConfigError(f"cycle_len {self.cycle.model.cycle_len} does not fit in clips of "
                              f"{self.dataset.scene.clip_length} frames")

    @property
    def scene(self) -> SceneConfig:
        """Scene config with the experiment seed substituted."""
        return self.dataset.scene.with_seed(self.seed)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["evaluate"]["models"] = list(self.evaluate.models)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Apply CLI flag values; ``None`` means the flag was not given."""
        top = {k: v for k, v in overrides.items() if k in ("seed", "output_dir", "force") and v is not None}
        cfg = replace(self, **top)
        if overrides.get("oracle_first_frame") is not None:
            cfg = replace(cfg, evaluate=replace(cfg.evaluate, oracle_first_frame=bool(overrides["oracle_first_frame"])))
        return cfg

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        d = _strict(cls, data, "config")
        parsers = {"dataset": DatasetSection, "segnet": SegSection, "cycle": CycleSection,
                   "fusion": FusionSection, "evaluate": EvaluateSection}
        try:
            for key, section in parsers.items():
                if key in d:
                    d[key] = section.from_dict(d[key])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config value: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} does not exist") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)
