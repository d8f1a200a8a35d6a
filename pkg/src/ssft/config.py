"""Run configuration files: ``data``, ``model``, ``train`` and ``augment`` sections."""
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentSpec
from .data import load_dataset, synth_dataset
from .model import SsftConfig
from .training import TrainConfig

SECTIONS = ("data", "model", "train", "augment")
SYNTH_KEYS = {"classes", "per_class", "size", "seed", "noise"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: dict
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    base_dir: Path = Path(".")

    def load_data(self):
        """(manifest, cubes) from a manifest path or an inline synthetic spec."""
        if "manifest" in self.data:
            path = Path(self.data["manifest"])
            return load_dataset(path if path.is_absolute() else self.base_dir / path)
        s = self.data["synth"]
        return synth_dataset(s.get("classes", 3), s.get("per_class", 20), tuple(s.get("size", (32, 32, 64))),
                             s.get("seed", 0), s.get("noise", 0.02))

    def model_config(self, num_bands, num_classes, **overrides):
        d = dict(self.model)
        for key, actual in (("num_bands", num_bands), ("num_classes", num_classes)):
            if key in d and d[key] != actual:
                raise ConfigError(f"model.{key}={d[key]} but the data has {actual}")
            d[key] = actual
        d.update(overrides)
        try:
            return SsftConfig.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def resolved(self, model_config):
        return {"data": self.data, "model": model_config.to_dict(), "train": self.train.to_dict(),
                "augment": [a.to_dict() for a in self.train.augment]}


def parse_run_config(doc, base_dir="."):
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}; allowed: {list(SECTIONS)}")
    data = doc.get("data")
    if not isinstance(data, dict) or len(data) != 1 or not set(data) <= {"manifest", "synth"}:
        raise ConfigError('data: expected exactly one of {"manifest": PATH} or {"synth": {...}}')
    if "synth" in data:
        bad = set(data["synth"]) - SYNTH_KEYS
        if bad:
            raise ConfigError(f"data.synth: unknown keys {sorted(bad)}")
    model = dict(doc.get("model", {}))
    train = dict(doc.get("train", {}))
    if "augment" in train:
        raise ConfigError("train.augment: list augmentations in the top-level 'augment' section")
    try:
        augment = [AugmentSpec.from_dict(a) for a in doc.get("augment", [])]
        train_config = TrainConfig.from_dict(train | {"augment": augment})
        # validate model keys early; band/class counts come from the data later
        SsftConfig.from_dict({"num_bands": 1, "num_classes": 2} | model)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(data, model, train_config, Path(base_dir))


def load_run_config(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_run_config(doc, path.parent)
