"""Experiment configuration: dataclasses plus strict YAML round-trip."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .layers import ConfigError
from .models import MODEL_KINDS


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    max_steps: int = 2000
    gamma: float = 1.0
    rho: float = 0.95
    epsilon: float = 1e-6
    sigma: float = 2.0
    eval_every: int = 200
    patience: int = 10
    checkpoint_every: int = 500


_DEFAULT_ENCODERS = {
    "block-parser": "toy-6conv",
    "e2e-blocks": "toy-6conv",
    "counter": "count-6res",
    "e2e-counter": "count-6res",
}


@dataclass
class ExperimentConfig:
    kind: str
    dataset: str = ""
    out_dir: str = "runs/latest"
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; valid kinds: {sorted(MODEL_KINDS)}")
        self.model.setdefault("encoder", _DEFAULT_ENCODERS[self.kind])
        if self.kind in ("block-parser", "e2e-blocks"):
            self.model.setdefault("image_channels", 1)
        else:
            self.model.setdefault("image_channels", 3)

    def to_dict(self):
        return {
            "kind": self.kind,
            "dataset": self.dataset,
            "out_dir": self.out_dir,
            "model": dict(self.model),
            "train": dataclasses.asdict(self.train),
        }


def _check_keys(mapping, allowed, where):
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}; "
                          f"allowed: {', '.join(sorted(allowed))}")


def config_from_dict(data) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config must be a mapping, got {type(data).__name__}")
    _check_keys(data, {"kind", "dataset", "out_dir", "model", "train"}, "config")
    if "kind" not in data:
        raise ConfigError("config requires a 'kind' key")
    train_data = data.get("train") or {}
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    _check_keys(train_data, train_fields, "train")
    model = data.get("model") or {}
    if not isinstance(model, dict):
        raise ConfigError("'model' must be a mapping of hyperparameters")
    return ExperimentConfig(
        kind=data["kind"],
        dataset=str(data.get("dataset", "")),
        out_dir=str(data.get("out_dir", "runs/latest")),
        model=dict(model),
        train=TrainConfig(**train_data),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"failed to parse {path}: {e}") from e
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
