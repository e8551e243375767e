"""Run configuration: presets, YAML (de)serialization and validation.

A run config is a YAML mapping with four sections (``train``, ``data``,
``eval``, ``output``) and an optional top-level ``preset`` name whose values
are used as defaults. The resolved config (preset merged, defaults expanded)
is what gets written into every run directory.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .augment import AugmentPolicy
from .data import needs_root, resolve_root
from .errors import ConfigInvalid
from .models import ENCODER_PRESETS, OBJECTIVES
from .trainer import PeerSpec, TrainConfig


@dataclass(frozen=True)
class DataConfig:
    name: str = "cifar10"
    root: Optional[str] = None
    train_subset: Optional[int] = None  # class-balanced subset size for pre-training / probing
    test_subset: Optional[int] = None
    subset_seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    probe_epochs: int = 100
    ood_probe_epochs: int = 50
    probe_batch_size: int = 64
    lr: float = 3e-4
    weight_decay: float = 1e-6
    knn_ks: tuple = (1, 2, 4, 8)
    finetune_epochs: int = 30
    seed: int = 0


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs/default"
    sweep_parallelism: int = 1


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    eval: EvalConfig = EvalConfig()
    output: OutputConfig = OutputConfig()
    preset: Optional[str] = None

    def to_dict(self) -> dict:
        d = {
            "preset": self.preset,
            "train": self.train.to_dict(),
            "data": asdict(self.data),
            "eval": {**asdict(self.eval), "knn_ks": list(self.eval.knn_ks)},
            "output": asdict(self.output),
        }
        return d


PRESETS: Dict[str, dict] = {
    "paper-tinyimagenet": {
        "train": {
            "peer1": {"encoder": "resnet18", "objective": "contrastive"},
            "peer2": {"encoder": "resnet50", "objective": "contrastive"},
            "mode": "joint", "lam": 100.0, "tau_c": 0.5, "tau_kd": 0.1,
            "lr": 3e-4, "weight_decay": 1e-6, "batch_size": 256, "epochs": 100,
            "checkpoint_every": 10, "image_size": 64,
            "augment": {"output_size": 64},
        },
        "data": {"name": "tiny-imagenet"},
        "eval": {"probe_epochs": 100, "ood_probe_epochs": 50, "probe_batch_size": 64},
        "output": {"dir": "runs/paper-tinyimagenet"},
    },
    "desk-cifar10": {
        "train": {
            "peer1": {"encoder": "conv4", "objective": "contrastive"},
            "peer2": {"encoder": "conv8", "objective": "contrastive"},
            "mode": "joint", "lam": 100.0, "tau_c": 0.5, "tau_kd": 0.1,
            "lr": 3e-4, "weight_decay": 1e-6, "batch_size": 128, "epochs": 50,
            "checkpoint_every": 5, "image_size": 32,
            "augment": {"output_size": 32},
        },
        "data": {"name": "cifar10", "train_subset": 4096, "test_subset": 2000},
        "eval": {"probe_epochs": 100, "ood_probe_epochs": 50, "probe_batch_size": 64},
        "output": {"dir": "runs/desk-cifar10"},
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(section: str, given: dict, allowed) -> None:
    for k in given:
        if k not in allowed:
            raise ConfigInvalid(f"{section}.{k}", f"unknown key (allowed: {sorted(allowed)})")


def _names(cls) -> List[str]:
    return [f.name for f in fields(cls)]


def _peer(section: str, d: Any) -> Optional[PeerSpec]:
    if d is None:
        return None
    if not isinstance(d, dict):
        raise ConfigInvalid(section, "expected a mapping")
    _check_keys(section, d, _names(PeerSpec))
    if d.get("encoder", "conv4") not in ENCODER_PRESETS:
        raise ConfigInvalid(f"{section}.encoder", f"unknown encoder {d.get('encoder')!r}; choose from {sorted(ENCODER_PRESETS)}")
    if d.get("objective", "contrastive") not in OBJECTIVES:
        raise ConfigInvalid(f"{section}.objective", f"must be one of {OBJECTIVES}")
    return PeerSpec(**d)


def _build(cls, section: str, d: dict, **converted):
    _check_keys(section, d, _names(cls))
    kwargs = {**d, **converted}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigInvalid(section, str(e)) from None


def resolve(raw: dict, check_data: bool = True) -> RunConfig:
    """Merge ``raw`` over its preset and validate every field.

    Raises:
        ConfigInvalid: naming the offending key path.
    """
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigInvalid("<root>", "config must be a mapping")
    _check_keys("<root>", raw, ["preset", "train", "data", "eval", "output"])
    preset = raw.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigInvalid("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        raw = deep_merge(PRESETS[preset], raw)

    t = dict(raw.get("train") or {})
    mode = t.get("mode", "joint")
    peer1 = _peer("train.peer1", t.pop("peer1", {}))
    if mode == "single":
        t.pop("peer2", None)
        peer2 = None
    else:
        peer2 = _peer("train.peer2", t.pop("peer2", {"encoder": "conv8"}))
    aug_raw = t.pop("augment", {}) or {}
    _check_keys("train.augment", aug_raw, _names(AugmentPolicy))
    try:
        augment = AugmentPolicy.from_dict(aug_raw)
    except (TypeError, ValueError) as e:
        raise ConfigInvalid("train.augment", str(e)) from None
    for key in ("lam", "tau_c", "tau_kd", "lr", "weight_decay"):
        if key in t and not isinstance(t[key], (int, float)):
            raise ConfigInvalid(f"train.{key}", f"expected a number, got {t[key]!r}")
    for key in ("tau_c", "tau_kd"):
        if key in t and t[key] <= 0:
            raise ConfigInvalid(f"train.{key}", "must be positive")
    if "lam" in t and t["lam"] < 0:
        raise ConfigInvalid("train.lam", "must be non-negative")
    for key in ("lam", "tau_c", "tau_kd", "lr", "weight_decay"):
        if key in t:
            t[key] = float(t[key])
    train = _build(TrainConfig, "train", t, peer1=peer1, peer2=peer2, augment=augment)
    if train.augment.output_size != train.image_size:
        raise ConfigInvalid("train.augment.output_size", "must equal train.image_size")

    data = _build(DataConfig, "data", dict(raw.get("data") or {}))
    if check_data and needs_root(data.name):
        root = resolve_root(data.root)
        if root is None:
            raise ConfigInvalid("data.root", f"dataset {data.name!r} needs a root directory (or $DOGO_DATA_ROOT)")
        if not root.is_dir():
            raise ConfigInvalid("data.root", f"{root} is not a directory")
    e = dict(raw.get("eval") or {})
    if "knn_ks" in e:
        ks = e["knn_ks"]
        if not ks or any(int(k) < 1 for k in ks):
            raise ConfigInvalid("eval.knn_ks", "must be a non-empty list of positive integers")
        e["knn_ks"] = tuple(int(k) for k in ks)
    ev = _build(EvalConfig, "eval", e)
    out = _build(OutputConfig, "output", dict(raw.get("output") or {}))
    return RunConfig(train, data, ev, out, preset)


def from_resolved_dict(d: dict) -> RunConfig:
    return resolve(d, check_data=False)


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def parse(text: str, check_data: bool = True) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigInvalid("<root>", f"not valid YAML: {e}") from None
    return resolve(raw, check_data=check_data)


def load(path, check_data: bool = True) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigInvalid("<path>", f"config file {p} not found")
    return parse(p.read_text(), check_data=check_data)


def set_override(raw: dict, dotted: str, value: str) -> dict:
    """Apply a ``section.key=value`` command-line override (value parsed as YAML)."""
    out = copy.deepcopy(raw)
    node = out
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigInvalid(dotted, "cannot descend into a scalar")
    node[parts[-1]] = yaml.safe_load(value)
    return out
