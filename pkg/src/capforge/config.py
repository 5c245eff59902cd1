"""Training and run configuration: flat JSON with schema validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from capforge.errors import DataError


@dataclass
class TrainConfig:
    seed: int = 0
    lambda_recon: float = 1.0
    k_similar: int = 5
    max_epochs: int = 30
    max_steps: int = 0  # 0 = no step cap
    batch_size: int = 16
    learning_rate: float = 2e-4
    patience: int = 5
    attribute_weight: float = 1.0
    pooling: str = "mean"
    cell: str = "gru"
    grid: int = 16
    c1: int = 8
    c2: int = 16
    d_v: int = 64
    d_a: int = 8
    d_e: int = 32
    d_h: int = 64
    max_len: int = 16
    min_count: int = 1
    beam_width: int = 3
    lambda_test: float = 1.0
    test_neighbors: bool = False

    def validate(self) -> list[str]:
        errs = []
        if self.lambda_recon < 0:
            errs.append("lambda_recon must be >= 0")
        if self.k_similar < 0:
            errs.append("k_similar must be >= 0")
        for name in ("max_epochs", "batch_size", "grid", "c1", "c2", "d_v", "d_a", "d_e", "d_h",
                     "min_count", "beam_width"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        if self.max_steps < 0:
            errs.append("max_steps must be >= 0")
        if self.patience < 0:
            errs.append("patience must be >= 0")
        if self.learning_rate <= 0:
            errs.append("learning_rate must be > 0")
        if self.attribute_weight < 0:
            errs.append("attribute_weight must be >= 0")
        if self.pooling not in ("mean", "max", "last"):
            errs.append("pooling must be one of mean, max, last")
        if self.cell not in ("gru", "lstm"):
            errs.append("cell must be gru or lstm")
        if self.grid % 4 or self.grid < 8:
            errs.append("grid must be a multiple of 4 and >= 8")
        if self.max_len < 3:
            errs.append("max_len must be >= 3")
        return errs

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunConfig(TrainConfig):
    dataset: str = ""
    checkpoint: str = "model.cgru"
    output_dir: str = "."
    split: float = 0.1

    def validate(self) -> list[str]:
        errs = super().validate()
        if not 0.0 <= self.split < 1.0:
            errs.append("split must lie in [0, 1)")
        return errs

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})


def _coerce(cls, data: dict) -> tuple[object | None, list[str]]:
    known = {f.name: f for f in fields(cls)}
    errs = [f"unknown key {k!r}" for k in data if k not in known]
    kwargs = {}
    for k, v in data.items():
        if k not in known:
            continue
        default = known[k].default
        if isinstance(default, bool):
            ok = isinstance(v, bool)
        elif isinstance(default, int):
            ok = isinstance(v, int) and not isinstance(v, bool)
        elif isinstance(default, float):
            ok = isinstance(v, (int, float)) and not isinstance(v, bool)
            v = float(v) if ok else v
        else:
            ok = isinstance(v, str)
        if not ok:
            errs.append(f"{k}: expected {type(default).__name__}, got {type(v).__name__}")
        else:
            kwargs[k] = v
    # range checks still run on the well-typed keys so every problem shows up at once
    obj = cls(**kwargs)
    errs += obj.validate()
    return (None if errs else obj), errs


def config_from_dict(data: dict, cls=RunConfig):
    """Build and validate a config; every problem is reported in one :class:`DataError`."""
    if not isinstance(data, dict):
        raise DataError("config must be a JSON object")
    obj, errs = _coerce(cls, data)
    if errs:
        raise DataError("invalid config:\n  " + "\n  ".join(errs))
    return obj


def load_config(path, cls=RunConfig):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON: {exc}") from exc
    return config_from_dict(data, cls)


def save_config(cfg, path) -> None:
    Path(path).write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
