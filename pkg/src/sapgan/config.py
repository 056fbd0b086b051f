"""Run configuration: one YAML file fully specifies an experiment.

Validation happens in two passes so a bad file fails with every problem
listed at once: structural checks against the committed JSON schema, then
semantic checks that need cross-field knowledge (attention stages must exist
in the network, the validation split must fit the dataset, a folder source
needs a root).  Nothing is built until the config is clean.
"""

from __future__ import annotations

import hashlib
import json
import os
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import yaml

from .data import (
    ISIC_CLASS_NAMES,
    LabeledDataset,
    isic_scaled_counts,
    load_image_folder,
    make_toy_dataset,
    split_stratified,
)
from .evaluation import ClassifierConfig
from .networks import MIN_RESOLUTION, NetworkSpec
from .schedule import TrainConfig, desk_batch_map

__all__ = [
    "ConfigError",
    "DATA_ROOT_ENV",
    "load_config",
    "config_hash",
    "config_schema",
    "report_schema",
    "class_names_for",
    "build_dataset",
    "build_spec",
    "build_train_config",
    "build_classifier_config",
]

DATA_ROOT_ENV = "SAPGAN_DATA_ROOT"

DEFAULTS: dict[str, dict[str, Any]] = {
    "data": {
        "source": "toy",
        "root": None,
        "resolution": 32,
        "counts": None,
        "val_total": None,
        "crop": None,
    },
    "network": {
        "max_resolution": 32,
        "latent_dim": 64,
        "base_channels": 128,
        "channel_floor": 16,
        "attention_stages": [],
        "attention_in": "both",
    },
    "train": {
        "total_images": 24_000,
        "images_per_phase": 4_000,
        "lr_g": 1e-3,
        "lr_d": 4e-3,
        "lr_ratio": None,
        "d_g_step_ratio": 1,
        "gp_weight": 10.0,
        "drift_weight": 1e-3,
        "batch_divisor": 16,
        "batch_by_resolution": None,
        "checkpoint_every_images": 0,
        "augment_reals": False,
    },
    "eval": {
        "architecture": "compact_cnn",
        "epochs": 50,
        "lr": 1e-3,
        "momentum": 0.9,
        "batch_size": 64,
        "bank_per_class": 62,
        "last_k": 3,
    },
    "sweep": {
        "stages": [8, 16, 32],
        "max_steps": None,
    },
    "augment_experiment": {
        "n_real_per_class": 20,
        "n_synth_per_class": 100,
        "seeds": [0, 1, 2],
    },
}


class ConfigError(Exception):
    """Invalid configuration; ``errors`` lists every problem found."""

    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("; ".join(errors))


def _load_schema(name: str) -> dict:
    with resources.files("sapgan").joinpath("schemas", name).open() as f:
        return json.load(f)


def config_schema() -> dict:
    return _load_schema("config.json")


def report_schema() -> dict:
    return _load_schema("report.json")


def _schema_errors(raw: dict) -> list[str]:
    validator = jsonschema.Draft202012Validator(config_schema())
    out = []
    for err in sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path)):
        where = ".".join(str(p) for p in err.absolute_path) or "<top level>"
        out.append(f"config error at {where}: {err.message}")
    return out


def _stage_resolutions(max_resolution: int) -> list[int]:
    out, r = [], MIN_RESOLUTION
    while r <= max_resolution:
        out.append(r)
        r *= 2
    return out


def _semantic_errors(cfg: dict) -> list[str]:
    errors = []
    net, data, train = cfg["network"], cfg["data"], cfg["train"]

    res = net["max_resolution"]
    if res & (res - 1):
        errors.append(f"config error at network.max_resolution: {res} is not a power of two")
    else:
        stages = _stage_resolutions(res)
        for a in net["attention_stages"]:
            if a not in stages:
                errors.append(
                    f"config error at network.attention_stages: {a} is not a stage of a {res}px network"
                )

    dres = data["resolution"]
    if dres & (dres - 1):
        errors.append(f"config error at data.resolution: {dres} is not a power of two")
    elif not (res & (res - 1)) and dres < res:
        errors.append(
            f"config error at data.resolution: {dres} is below network.max_resolution {res}"
        )

    if data["source"] == "toy":
        counts = data["counts"] or list(isic_scaled_counts())
        total = sum(counts)
        if data["val_total"] is not None and data["val_total"] >= total:
            errors.append(
                f"config error at data.val_total: {data['val_total']} leaves no training data "
                f"(dataset holds {total})"
            )

    if train["images_per_phase"] > train["total_images"]:
        errors.append(
            "config error at train.images_per_phase: exceeds total_images, "
            "no phase would ever complete"
        )
    return errors


def load_config(path: str | Path) -> dict:
    """Read, validate, and default-fill a YAML config; raises ConfigError."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config error at <file>: {path} does not exist"])
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError([f"config error at <file>: unparseable YAML: {e}"]) from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(["config error at <top level>: config must be a mapping"])

    errors = _schema_errors(raw)

    cfg: dict[str, Any] = {"seed": raw.get("seed", 0), "out": raw.get("out")}
    for section, defaults in DEFAULTS.items():
        merged = dict(defaults)
        if isinstance(raw.get(section), dict):
            merged.update(raw[section])
        cfg[section] = merged

    try:
        errors += _semantic_errors(cfg)
    except Exception:
        # the document is too malformed for cross-field checks; the schema
        # errors already collected describe why
        pass
    if errors:
        raise ConfigError(errors)
    return cfg


def config_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


def _resolve_root(data: dict) -> Path:
    root = data.get("root") or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(
            [
                "config error at data.root: folder source needs a path "
                f"(set data.root or the {DATA_ROOT_ENV} environment variable)"
            ]
        )
    return Path(root)


def class_names_for(data: dict) -> tuple[str, ...]:
    """Class names without loading any image data."""
    if data["source"] == "toy":
        counts = data["counts"] or list(isic_scaled_counts())
        if len(counts) <= 7:
            return ISIC_CLASS_NAMES[: len(counts)]
        return tuple(f"class{i}" for i in range(len(counts)))
    root = _resolve_root(data)
    if not root.is_dir():
        raise ConfigError([f"config error at data.root: {root} does not exist"])
    return tuple(sorted(d.name for d in root.iterdir() if d.is_dir()))


def build_dataset(data: dict, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Materialize the configured source and return its train/val split."""
    if data["source"] == "toy":
        counts = tuple(data["counts"] or isic_scaled_counts())
        full = make_toy_dataset(counts=counts, resolution=data["resolution"], seed=seed)
    else:
        full = load_image_folder(_resolve_root(data), resolution=data["resolution"])
    val_total = data["val_total"]
    if val_total is None:
        val_total = max(1, round(0.2 * len(full)))
    return split_stratified(full, val_total=val_total, seed=seed)


def build_spec(net: dict, n_classes: int) -> NetworkSpec:
    return NetworkSpec.build(
        max_resolution=net["max_resolution"],
        latent_dim=net["latent_dim"],
        n_classes=n_classes,
        base_channels=net["base_channels"],
        channel_floor=net["channel_floor"],
        attention_stages=tuple(net["attention_stages"]),
        attention_in=net["attention_in"],
    )


def build_train_config(train: dict, seed: int) -> TrainConfig:
    if train["batch_by_resolution"] is not None:
        batches = {int(k): v for k, v in train["batch_by_resolution"].items()}
    else:
        batches = desk_batch_map(train["batch_divisor"])
    return TrainConfig(
        total_images=train["total_images"],
        images_per_phase=train["images_per_phase"],
        lr_g=train["lr_g"],
        lr_d=train["lr_d"],
        lr_ratio=train["lr_ratio"],
        d_g_step_ratio=train["d_g_step_ratio"],
        gp_weight=train["gp_weight"],
        drift_weight=train["drift_weight"],
        batch_by_resolution=batches,
        seed=seed,
        checkpoint_every_images=train["checkpoint_every_images"],
        augment_reals=train["augment_reals"],
    )


def build_classifier_config(eval_cfg: dict, input_resolution: int) -> ClassifierConfig:
    return ClassifierConfig(
        architecture=eval_cfg["architecture"],
        epochs=eval_cfg["epochs"],
        lr=eval_cfg["lr"],
        momentum=eval_cfg["momentum"],
        batch_size=eval_cfg["batch_size"],
        input_resolution=input_resolution,
    )
