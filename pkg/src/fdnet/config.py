"""Run configuration: one JSON file plus dotted-key overrides.

Precedence is flags > file > defaults. Sections::

    {"model": {...}, "train": {...}, "loss": {...}, "synth": {...},
     "data": {...}, "eval": {...}}

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig
from .loss import LossConfig
from .metrics import NORMALIZED_THRESHOLDS
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    root: str = "data"
    format: str = "pgm"
    val_sequences: int = 8
    test_sequences: int = 8
    filter_noisy: bool = True
    eps_act: float = 1e-3

    def validate(self) -> None:
        if self.format not in ("pgm", "grd"):
            raise ConfigError("data.format must be 'pgm' or 'grd'")
        if self.val_sequences < 0 or self.test_sequences < 0:
            raise ConfigError("data.val_sequences and data.test_sequences must be >= 0")
        if self.eps_act < 0:
            raise ConfigError("data.eps_act must be >= 0")


@dataclass
class EvalSection:
    thresholds: list[float] = field(default_factory=lambda: list(NORMALIZED_THRESHOLDS))
    batch_size: int = 16

    def validate(self) -> None:
        if not self.thresholds:
            raise ConfigError("eval.thresholds must not be empty")
        if self.batch_size < 1:
            raise ConfigError("eval.batch_size must be positive")


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    loss: LossConfig
    synth: SynthConfig
    data: DataSection
    eval: EvalSection

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("loss")
        return {
            "model": self.model.to_dict(),
            "train": train,
            "loss": self.loss.to_dict(),
            "synth": self.synth.to_dict(),
            "data": dataclasses.asdict(self.data),
            "eval": dataclasses.asdict(self.eval),
        }


SECTIONS = ("model", "train", "loss", "synth", "data", "eval")


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


_KEYS = {
    "model": _fields(ModelConfig),
    "train": _fields(TrainConfig) - {"loss"},
    "loss": _fields(LossConfig),
    "synth": _fields(SynthConfig),
    "data": _fields(DataSection),
    "eval": _fields(EvalSection),
}


def parse_value(text: str):
    """JSON literal if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    if len(parts) < 2 or parts[0] not in SECTIONS:
        raise ConfigError(f"override {dotted!r} must look like <section>.<key> with section in {SECTIONS}")
    if parts[1] not in _KEYS[parts[0]]:
        raise ConfigError(f"unknown config key {dotted!r}")
    node = doc.setdefault(parts[0], {})
    for p in parts[1:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {p} is not a mapping")
    node[parts[-1]] = value


def build(doc: dict) -> RunConfig:
    """Validate a raw config mapping into a :class:`RunConfig`."""
    doc = copy.deepcopy(doc)
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for sec in SECTIONS:
        bad = set(doc.get(sec, {})) - _KEYS[sec]
        if bad:
            raise ConfigError(f"unknown keys in {sec}: {sorted(bad)}")
    try:
        loss = LossConfig.from_dict(doc.get("loss", {}))
        train = TrainConfig(**{**doc.get("train", {}), "loss": loss})
        model = ModelConfig.from_dict(doc.get("model", {}))
        synth = SynthConfig.from_dict(doc.get("synth", {}))
        data = DataSection(**doc.get("data", {}))
        ev = EvalSection(**doc.get("eval", {}))
        data.validate()
        ev.validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    if (synth.H, synth.W) != model.input_size:
        raise ConfigError(f"synth.H/W {(synth.H, synth.W)} differ from model.input_size {model.input_size}")
    return RunConfig(model, train, loss, synth, data, ev)


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load(path: str | None, overrides: list[tuple[str, object]] = (), seed: int | None = None) -> RunConfig:
    doc = desk_defaults()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        doc = _merge(doc, user)
    if seed is not None:
        apply_override(doc, "train.seed", seed)
        apply_override(doc, "synth.seed", seed)
    for key, value in overrides:
        apply_override(doc, key, value)
    return build(doc)


def desk_defaults() -> dict:
    """CLI base layer: the model is sized for the 32x32 synthetic frames."""
    return {"model": {"input_size": [32, 32]}}
