"""Run configuration: one JSON file merging network, training, data, and eval
sections, with dotted-path command-line overrides and a content hash.

Schema (all keys optional; defaults shown in README):

    {
      "seed": 0, "dtype": "float64", "out": "runs/demo",
      "net":   { ... NetworkConfig fields ... },
      "train": { ... TrainConfig fields ... },
      "data":  { ... SynthSpec fields ..., "n_train": 8, "n_val": 4, "dir": "dataset" },
      "eval":  { "percentile": 95, "split": "val", "checkpoint": null }
    }

Sections inherit the top-level seed unless they set their own. Geometry and
domain validation happens here, before anything is allocated.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .data import SynthSpec
from .errors import ConfigError
from .net import NetworkConfig
from .train import TrainConfig


@dataclass
class RunConfig:
    raw: dict
    seed: int
    dtype: str
    out: Path
    net: NetworkConfig
    net_seed: int
    train: TrainConfig
    data_spec: SynthSpec
    n_train: int
    n_val: int
    data_dir: Path
    eval_percentile: int
    eval_split: str
    checkpoint: Optional[str]
    config_hash: str


def apply_override(raw: dict, assignment: str) -> None:
    """Apply one ``dotted.key=value`` override; values parse as JSON, else string."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    key, _, text = assignment.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"override has an empty key: {assignment!r}")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {key!r} crosses a non-section value")
    node[parts[-1]] = value


def config_hash(raw: dict) -> str:
    canonical = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def build_run_config(path=None, seed=None, out=None, overrides=()) -> RunConfig:
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    else:
        raw = {}
    raw = copy.deepcopy(raw)
    for assignment in overrides:
        apply_override(raw, assignment)
    if seed is not None:
        raw["seed"] = int(seed)
    if out is not None:
        raw["out"] = str(out)
    raw.setdefault("seed", 0)
    raw.setdefault("dtype", "float64")
    raw.setdefault("out", "runs/out")
    for section in ("net", "train", "data", "eval"):
        raw.setdefault(section, {})
        if not isinstance(raw[section], dict):
            raise ConfigError(f"config section {section!r} must be an object")

    master_seed = int(raw["seed"])
    dtype = raw["dtype"]
    if dtype not in ("float32", "float64"):
        raise ConfigError(f"dtype must be float32 or float64, got {dtype!r}")

    net_section = dict(raw["net"])
    net_seed = int(net_section.pop("seed", master_seed))
    net = NetworkConfig.from_dict(net_section)

    train_section = dict(raw["train"])
    train_section.setdefault("seed", master_seed)
    train = TrainConfig.from_dict(train_section)

    data_section = dict(raw["data"])
    n_train = int(data_section.pop("n_train", 8))
    n_val = int(data_section.pop("n_val", 4))
    data_dir = data_section.pop("dir", "dataset")
    data_section.setdefault("seed", master_seed)
    data_section.setdefault("num_classes", net.num_classes)
    data_section.setdefault("size", net.input_size)
    spec = SynthSpec.from_dict(data_section)
    if spec.size != net.input_size:
        raise ConfigError(
            f"data.size={spec.size} does not match net.input_size={net.input_size}"
        )
    if spec.num_classes != net.num_classes:
        raise ConfigError(
            f"data.num_classes={spec.num_classes} != net.num_classes={net.num_classes}"
        )
    if n_train < 1 or n_val < 0:
        raise ConfigError(f"need n_train >= 1 and n_val >= 0, got {n_train}/{n_val}")

    eval_section = dict(raw["eval"])
    percentile = int(eval_section.pop("percentile", 95))
    split = eval_section.pop("split", "val")
    checkpoint = eval_section.pop("checkpoint", None)
    if eval_section:
        raise ConfigError(f"unknown eval config keys: {sorted(eval_section)}")
    if percentile not in (95, 100):
        raise ConfigError(f"eval.percentile must be 95 or 100, got {percentile}")
    if split not in ("train", "val"):
        raise ConfigError(f"eval.split must be train or val, got {split!r}")

    out_path = Path(raw["out"])
    data_path = Path(data_dir)
    if not data_path.is_absolute():
        data_path = out_path / data_path
    return RunConfig(
        raw=raw,
        seed=master_seed,
        dtype=dtype,
        out=out_path,
        net=net,
        net_seed=net_seed,
        train=train,
        data_spec=spec,
        n_train=n_train,
        n_val=n_val,
        data_dir=data_path,
        eval_percentile=percentile,
        eval_split=split,
        checkpoint=checkpoint,
        config_hash=config_hash(raw),
    )
