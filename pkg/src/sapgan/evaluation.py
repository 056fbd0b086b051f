"""Classifier-based generator scoring.

A generator is measured through a downstream classifier two ways: train the
classifier on generated images and test on held-out real ones (how useful the
samples are), or train on real images and test on generated ones (how close
the samples sit to the data).  Accuracy is always averaged over classes, so a
collapsed classifier scores 1/n_classes no matter how skewed the evaluation
set is.

Two stub generators bracket the scores: a replay stub that emits held-out real
images (should match a real-trained classifier) and a noise stub (should sit
at chance).  Provenance tags on every dataset keep generated samples out of
real-side roles and vice versa.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .data import (
    LabeledDataset,
    batch_tensor,
    from_gan_range,
    normalize_for_classifier,
)
from .networks import FadeState, Generator

__all__ = [
    "ClassifierConfig",
    "CompactCNN",
    "register_architecture",
    "build_classifier",
    "TrainedClassifier",
    "train_classifier",
    "evaluate_accuracy",
    "per_class_accuracy",
    "SampleBank",
    "build_sample_bank",
    "GanSampler",
    "ReplaySampler",
    "NoiseSampler",
    "gan_train_score",
    "gan_test_score",
    "EvalReport",
    "evaluate_generator",
    "select_best_checkpoint",
    "emit_sample_grid",
]

DEFAULT_BANK_PER_CLASS = 1000


@dataclass(frozen=True)
class ClassifierConfig:
    """Downstream classifier recipe; one config is shared by every arm of a run."""

    architecture: str = "compact_cnn"
    epochs: int = 50
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 64
    input_resolution: int = 32

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.momentum < 0:
            raise ValueError(f"momentum must be >= 0, got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.input_resolution < 1:
            raise ValueError(f"input_resolution must be >= 1, got {self.input_resolution}")

    def hash(self) -> str:
        blob = json.dumps(self.__dict__, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


class CompactCNN(nn.Module):
    """Small conv stack ending in global average pooling.

    Halving blocks stop while the map is still 2x2, so any power-of-two input
    from 4px up works.
    """

    def __init__(
        self,
        n_classes: int,
        input_resolution: int = 32,
        widths: tuple[int, ...] = (32, 64, 128, 128),
    ):
        super().__init__()
        n_blocks = max(1, min(len(widths), int(math.log2(input_resolution)) - 1))
        layers: list[nn.Module] = []
        c = 3
        for w in widths[:n_blocks]:
            layers += [
                nn.Conv2d(c, w, 3, padding=1),
                nn.BatchNorm2d(w),
                nn.LeakyReLU(0.2),
                nn.MaxPool2d(2),
            ]
            c = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c, n_classes)

    def forward(self, x: Tensor) -> Tensor:
        h = self.features(x)
        return self.head(h.mean(dim=(2, 3)))


ARCHITECTURES: dict[str, Callable[[int, ClassifierConfig], nn.Module]] = {
    "compact_cnn": lambda n_classes, cfg: CompactCNN(n_classes, cfg.input_resolution),
}


def register_architecture(name: str, factory: Callable[[int, ClassifierConfig], nn.Module]) -> None:
    """Plug in a deeper model; the factory gets (n_classes, config)."""
    ARCHITECTURES[name] = factory


def build_classifier(cfg: ClassifierConfig, n_classes: int) -> nn.Module:
    if cfg.architecture not in ARCHITECTURES:
        raise ValueError(
            f"unknown architecture {cfg.architecture!r}; registered: {sorted(ARCHITECTURES)}"
        )
    return ARCHITECTURES[cfg.architecture](n_classes, cfg)


def _check_resolution(ds: LabeledDataset, cfg: ClassifierConfig, role: str) -> None:
    h, w = ds[0][0].shape[:2]
    if (h, w) != (cfg.input_resolution, cfg.input_resolution):
        raise ValueError(
            f"{role} images are {h}x{w} but the classifier expects "
            f"{cfg.input_resolution}x{cfg.input_resolution}"
        )


def _predict(model: nn.Module, ds: LabeledDataset, batch_size: int) -> np.ndarray:
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(ds), batch_size):
            idx = range(start, min(start + batch_size, len(ds)))
            x, _ = batch_tensor(ds, idx)
            logits = model(normalize_for_classifier(x))
            preds.append(logits.argmax(dim=1).numpy())
    return np.concatenate(preds)


def per_class_accuracy(model: nn.Module, ds: LabeledDataset, batch_size: int = 64) -> np.ndarray:
    """Recall per class; classes absent from the set come back as NaN."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = _predict(model, ds, batch_size)
    labels = ds.labels
    out = np.full(ds.n_classes, np.nan)
    for c in range(ds.n_classes):
        mask = labels == c
        if mask.any():
            out[c] = float((preds[mask] == c).mean())
    return out


def evaluate_accuracy(model: nn.Module, ds: LabeledDataset, batch_size: int = 64) -> float:
    """Mean per-class recall in [0, 1], skipping classes the set lacks."""
    per = per_class_accuracy(model, ds, batch_size)
    return float(np.nanmean(per))


@dataclass
class TrainedClassifier:
    model: nn.Module
    accuracy: float  # best validation accuracy over epochs
    best_epoch: int
    history: list[dict] = field(default_factory=list)


def train_classifier(
    train: LabeledDataset,
    val: LabeledDataset,
    cfg: ClassifierConfig,
    seed: int = 0,
) -> TrainedClassifier:
    """Momentum-SGD training; returns the best-validation-accuracy snapshot."""
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation sets must be non-empty")
    if train.class_names != val.class_names:
        raise ValueError("train and validation sets must share one class space")
    missing = [train.class_names[c] for c, n in enumerate(train.counts()) if n == 0]
    if missing:
        raise ValueError(f"classes absent from the training set: {missing}")
    _check_resolution(train, cfg, "training")
    _check_resolution(val, cfg, "validation")

    torch.manual_seed(seed)
    model = build_classifier(cfg, train.n_classes)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    loss_fn = nn.CrossEntropyLoss()
    shuffle_rng = torch.Generator().manual_seed(seed + 1)

    best_acc, best_epoch, best_state = -1.0, -1, None
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(len(train), generator=shuffle_rng).tolist()
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = batch_tensor(train, idx)
            logits = model(normalize_for_classifier(x))
            loss = loss_fn(logits, y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(idx)
        acc = evaluate_accuracy(model, val, cfg.batch_size)
        history.append({"epoch": epoch, "train_loss": epoch_loss / len(train), "val_accuracy": acc})
        if acc > best_acc:
            best_acc, best_epoch = acc, epoch
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)
    return TrainedClassifier(model=model, accuracy=best_acc, best_epoch=best_epoch, history=history)


# -- sample banks ----------------------------------------------------------


@dataclass
class SampleBank:
    """Generated images, the same number for every class."""

    dataset: LabeledDataset
    per_class: int

    def __post_init__(self) -> None:
        if self.dataset.provenance != "generated":
            raise ValueError(f"sample banks must be tagged generated, got {self.dataset.provenance!r}")
        counts = self.dataset.counts()
        if not (counts == self.per_class).all():
            raise ValueError(
                f"every class needs exactly {self.per_class} samples, got {counts.tolist()}"
            )
        sizes = {img.shape for img, _ in self.dataset.items}
        if len(sizes) > 1:
            raise ValueError(f"bank images must share one size, got {sorted(sizes)}")


class GanSampler:
    """Draws class-conditional samples from a trained generator."""

    def __init__(self, generator: Generator, fade: FadeState | None = None, seed: int = 0, batch: int = 32):
        self.generator = generator
        self.fade = fade or FadeState(generator.spec.n_stages - 1, 1.0)
        self.seed = seed
        self.batch = batch

    def sample(self, label: int, n: int) -> np.ndarray:
        g = torch.Generator().manual_seed(self.seed * 100_003 + label * 7_919 + 1)
        out = []
        self.generator.eval()
        with torch.no_grad():
            for start in range(0, n, self.batch):
                b = min(self.batch, n - start)
                z = torch.randn(b, self.generator.spec.latent_dim, generator=g)
                labels = torch.full((b,), label, dtype=torch.long)
                imgs = from_gan_range(self.generator(z, labels, self.fade))
                out.append(imgs.permute(0, 2, 3, 1).numpy().astype(np.float32))
        return np.concatenate(out)


class ReplaySampler:
    """Perfect-memorization stand-in: emits held-out real images unchanged."""

    def __init__(self, source: LabeledDataset, seed: int = 0):
        if len(source) == 0:
            raise ValueError("replay source is empty")
        self.source = source
        self.seed = seed
        self._by_class = source.indices_by_class()

    def sample(self, label: int, n: int) -> np.ndarray:
        pool = self._by_class[label]
        if not pool:
            raise ValueError(f"replay source has no images of class {label}")
        rng = np.random.default_rng((self.seed, label))
        if n <= len(pool):
            chosen = rng.permutation(len(pool))[:n]
        else:
            chosen = rng.integers(0, len(pool), size=n)
        return np.stack([self.source[pool[i]][0] for i in chosen])


class NoiseSampler:
    """Uniform noise at the target resolution; the floor any generator must beat."""

    def __init__(self, resolution: int, seed: int = 0):
        self.resolution = resolution
        self.seed = seed

    def sample(self, label: int, n: int) -> np.ndarray:
        rng = np.random.default_rng((self.seed, label))
        return rng.random((n, self.resolution, self.resolution, 3), dtype=np.float32)


def build_sample_bank(sampler, n_classes: int, per_class: int, class_names: Sequence[str] | None = None) -> SampleBank:
    """Draw per_class samples of every class; missing classes surface as errors."""
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    items: list[tuple[np.ndarray, int]] = []
    for label in range(n_classes):
        imgs = sampler.sample(label, per_class)
        if imgs.shape[0] != per_class:
            raise ValueError(
                f"sampler returned {imgs.shape[0]} images for class {label}, wanted {per_class}"
            )
        items.extend((imgs[i], label) for i in range(per_class))
    names = tuple(class_names) if class_names else tuple(f"class{i}" for i in range(n_classes))
    ds = LabeledDataset(items=items, class_names=names, provenance="generated")
    return SampleBank(dataset=ds, per_class=per_class)


# -- scores ----------------------------------------------------------------


def _require_provenance(ds: LabeledDataset, expected: str, role: str) -> None:
    if ds.provenance != expected:
        raise ValueError(
            f"{role} must carry provenance {expected!r}, got {ds.provenance!r}; "
            "real and generated roles cannot be swapped"
        )


def gan_train_score(
    bank: SampleBank, real_val: LabeledDataset, cfg: ClassifierConfig, seed: int = 0
) -> float:
    """Train on generated samples, evaluate on real validation images."""
    _require_provenance(bank.dataset, "generated", "the gan-train training bank")
    _require_provenance(real_val, "real", "the gan-train evaluation set")
    bank_ds = bank.dataset
    if bank_ds.class_names != real_val.class_names:
        bank_ds = LabeledDataset(
            items=bank_ds.items, class_names=real_val.class_names, provenance="generated"
        )
    trained = train_classifier(bank_ds, real_val, cfg, seed=seed)
    return trained.accuracy


def gan_test_score(
    bank: SampleBank,
    real_train: LabeledDataset,
    real_val: LabeledDataset,
    cfg: ClassifierConfig,
    seed: int = 0,
) -> float:
    """Train on real images, evaluate on the generated bank."""
    _require_provenance(bank.dataset, "generated", "the gan-test evaluation bank")
    _require_provenance(real_train, "real", "the gan-test training set")
    _require_provenance(real_val, "real", "the gan-test validation set")
    trained = train_classifier(real_train, real_val, cfg, seed=seed)
    bank_ds = bank.dataset
    if bank_ds.class_names != real_train.class_names:
        bank_ds = LabeledDataset(
            items=bank_ds.items, class_names=real_train.class_names, provenance="generated"
        )
    return evaluate_accuracy(trained.model, bank_ds, cfg.batch_size)


@dataclass
class EvalReport:
    """One generator's scorecard against a fixed real train/val split."""

    gan_train: float
    gan_test: float
    real_baseline: float
    per_class_gan_train: list[float | None]
    per_class_gan_test: list[float | None]
    sample_counts: dict[str, int]
    config_hash: str
    seed: int

    def __post_init__(self) -> None:
        for name in ("gan_train", "gan_test", "real_baseline"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for key, count in self.sample_counts.items():
            if count < 1:
                raise ValueError(f"sample count {key} must be positive, got {count}")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, allow_nan=False)

    def to_csv(self) -> str:
        return (
            "gan_train,gan_test,real_baseline,config_hash,seed\n"
            f"{self.gan_train:.6f},{self.gan_test:.6f},{self.real_baseline:.6f},"
            f"{self.config_hash},{self.seed}\n"
        )


def evaluate_generator(
    bank: SampleBank,
    real_train: LabeledDataset,
    real_val: LabeledDataset,
    cfg: ClassifierConfig,
    seed: int = 0,
    real_baseline: float | None = None,
) -> EvalReport:
    """Full scorecard: both scores plus the real-data reference, shared seed."""
    _require_provenance(bank.dataset, "generated", "the sample bank")
    _require_provenance(real_train, "real", "the real training set")
    _require_provenance(real_val, "real", "the real validation set")
    if real_baseline is None:
        real_baseline = train_classifier(real_train, real_val, cfg, seed=seed).accuracy

    bank_ds = bank.dataset
    if bank_ds.class_names != real_val.class_names:
        bank_ds = LabeledDataset(
            items=bank_ds.items, class_names=real_val.class_names, provenance="generated"
        )
    gt_model = train_classifier(bank_ds, real_val, cfg, seed=seed)
    per_gt = per_class_accuracy(gt_model.model, real_val, cfg.batch_size)

    rt_model = train_classifier(real_train, real_val, cfg, seed=seed)
    per_gte = per_class_accuracy(rt_model.model, bank_ds, cfg.batch_size)

    def clean(per: np.ndarray) -> list[float | None]:
        return [None if math.isnan(v) else round(float(v), 6) for v in per]

    return EvalReport(
        gan_train=gt_model.accuracy,
        gan_test=float(np.nanmean(per_gte)),
        real_baseline=real_baseline,
        per_class_gan_train=clean(per_gt),
        per_class_gan_test=clean(per_gte),
        sample_counts={
            "bank_per_class": bank.per_class,
            "real_train": len(real_train),
            "real_val": len(real_val),
        },
        config_hash=cfg.hash(),
        seed=seed,
    )


def select_best_checkpoint(
    checkpoint_paths: Sequence[str | Path],
    score_fn: Callable[[str | Path], float],
    last_k: int = 3,
) -> tuple[Path, float]:
    """Score the last ``last_k`` checkpoints and keep the best one."""
    if not checkpoint_paths:
        raise ValueError("no checkpoints to select from")
    if last_k < 1:
        raise ValueError(f"last_k must be >= 1, got {last_k}")
    tail = list(checkpoint_paths)[-last_k:]
    scored = [(Path(p), score_fn(p)) for p in tail]
    return max(scored, key=lambda t: t[1])


# -- inspection ------------------------------------------------------------


LABEL_GUTTER = 44  # left strip holding class names, px


def emit_sample_grid(bank: SampleBank, path: str | Path, per_class: int = 8) -> Path:
    """Write a PNG contact sheet, one row per class, class names in a left gutter.

    Output is a deterministic function of the bank: height is n_classes * S,
    width is LABEL_GUTTER + per_class * S for sample size S, rows in class
    order and samples in bank order.
    """
    from PIL import Image, ImageDraw

    ds = bank.dataset
    if len(ds) == 0:
        raise ValueError("cannot render an empty bank")
    per_class = min(per_class, bank.per_class)
    s = ds[0][0].shape[0]
    grid = np.zeros((ds.n_classes * s, LABEL_GUTTER + per_class * s, 3), dtype=np.float32)
    grid[:, :LABEL_GUTTER] = 0.13
    by_class = ds.indices_by_class()
    for c in range(ds.n_classes):
        row = grid[c * s : (c + 1) * s]
        for j, i in enumerate(by_class[c][:per_class]):
            row[:, LABEL_GUTTER + j * s : LABEL_GUTTER + (j + 1) * s] = ds[i][0]
    image = Image.fromarray((grid * 255).round().astype(np.uint8))
    draw = ImageDraw.Draw(image)
    for c, name in enumerate(ds.class_names):
        draw.text((3, c * s + max(0, (s - 11) // 2)), name[:7], fill=(235, 235, 235))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image.save(path, format="PNG")
    return path
