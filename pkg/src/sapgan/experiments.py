"""Protocol drivers: the attention-placement sweep and the augmentation study.

Both are config-sized rather than full-scale.  The sweep trains one GAN per
attention placement plus a no-attention baseline under one shared seed and
data stream, then scores each arm's best recent checkpoint.  The augmentation
study compares a small real training set against the same set enlarged with
either generated samples or augmented copies, repeated over seeds so the
report carries a mean instead of a single lucky draw.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import AugmentPolicy, LabeledDataset, augment_with_seed
from .evaluation import (
    ClassifierConfig,
    EvalReport,
    GanSampler,
    SampleBank,
    build_sample_bank,
    emit_sample_grid,
    evaluate_generator,
    gan_train_score,
    select_best_checkpoint,
    train_classifier,
)
from .networks import NetworkSpec, StageSpec
from .schedule import TrainConfig
from .train import Trainer, load_generator

__all__ = [
    "SweepReport",
    "placement_sweep",
    "AugmentationReport",
    "augmentation_experiment",
]

# full-scale bank is 1000 per class; the desk divisor of 16 lands here
DESK_BANK_PER_CLASS = 62


def _with_attention(spec: NetworkSpec, resolutions: tuple[int, ...]) -> NetworkSpec:
    known = {s.resolution for s in spec.stages}
    unknown = sorted(set(resolutions) - known)
    if unknown:
        raise ValueError(f"no stage at resolution(s) {unknown}; spec has {sorted(known)}")
    stages = tuple(
        StageSpec(s.resolution, s.channels, s.resolution in resolutions) for s in spec.stages
    )
    return NetworkSpec(
        stages=stages,
        latent_dim=spec.latent_dim,
        n_classes=spec.n_classes,
        attention_in=spec.attention_in,
    )


@dataclass
class SweepReport:
    """Accuracy table: one real-data column, one baseline, one per placement."""

    stages: tuple[int, ...]
    real_baseline: float
    reports: dict[str, EvalReport]
    best_checkpoints: dict[str, str]

    def column_names(self) -> tuple[str, ...]:
        return ("real", "baseline") + tuple(f"attn_{s}" for s in self.stages)

    def row(self, metric: str) -> list[float]:
        vals = [self.real_baseline]
        for name in self.column_names()[1:]:
            vals.append(getattr(self.reports[name], metric))
        return vals

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(("metric",) + self.column_names())
        for metric in ("gan_train", "gan_test"):
            writer.writerow([metric] + [f"{v:.4f}" for v in self.row(metric)])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path


def placement_sweep(
    real_train: LabeledDataset,
    real_val: LabeledDataset,
    base_spec: NetworkSpec,
    train_cfg: TrainConfig,
    classifier_cfg: ClassifierConfig,
    out_dir: str | Path,
    stages: Sequence[int] = (8, 16, 32),
    bank_per_class: int = DESK_BANK_PER_CLASS,
    last_k: int = 3,
    eval_seed: int = 0,
    max_steps: int | None = None,
) -> SweepReport:
    """Train baseline plus one GAN per attention placement; score every arm.

    Arms share ``train_cfg`` (seed included) so the only varied factor is the
    attention placement.  Each arm's bank comes from its best checkpoint among
    the last ``last_k``, judged by gan_train, and a sample grid lands next to
    the checkpoints.
    """
    if classifier_cfg.input_resolution != base_spec.max_resolution:
        raise ValueError(
            f"classifier expects {classifier_cfg.input_resolution}px but the "
            f"networks generate {base_spec.max_resolution}px"
        )
    out_dir = Path(out_dir)
    if train_cfg.checkpoint_every_images == 0:
        # leave enough periodic saves for best-of-last-k selection
        every = -(-train_cfg.total_images // (last_k + 1))
        train_cfg = replace(train_cfg, checkpoint_every_images=every)

    real_acc = train_classifier(real_train, real_val, classifier_cfg, seed=eval_seed).accuracy

    arms: list[tuple[str, tuple[int, ...]]] = [("baseline", ())]
    arms += [(f"attn_{s}", (int(s),)) for s in stages]
    reports: dict[str, EvalReport] = {}
    best_paths: dict[str, str] = {}
    for name, placed in arms:
        arm_dir = out_dir / name
        trainer = Trainer(_with_attention(base_spec, placed), train_cfg, real_train, arm_dir)
        trainer.train(max_steps=max_steps)
        ckpts = sorted(arm_dir.glob("ckpt_*.ckpt"))

        banks: dict[Path, SampleBank] = {}

        def bank_for(path: Path) -> SampleBank:
            if path not in banks:
                g, _ = load_generator(path)
                sampler = GanSampler(g, seed=eval_seed)
                banks[path] = build_sample_bank(
                    sampler, base_spec.n_classes, bank_per_class, real_train.class_names
                )
            return banks[path]

        best_path, _ = select_best_checkpoint(
            ckpts,
            lambda p: gan_train_score(bank_for(Path(p)), real_val, classifier_cfg, eval_seed),
            last_k=last_k,
        )
        bank = bank_for(best_path)
        reports[name] = evaluate_generator(
            bank, real_train, real_val, classifier_cfg, seed=eval_seed, real_baseline=real_acc
        )
        best_paths[name] = str(best_path)
        emit_sample_grid(bank, arm_dir / "samples.png")

    report = SweepReport(
        stages=tuple(int(s) for s in stages),
        real_baseline=real_acc,
        reports=reports,
        best_checkpoints=best_paths,
    )
    report.write_csv(out_dir / "sweep.csv")
    return report


@dataclass
class AugmentationReport:
    """Per-seed validation accuracies for the three training-set variants."""

    n_real_per_class: int
    n_synth_per_class: int
    seeds: tuple[int, ...]
    real_only: list[float]
    gan_augmented: list[float]
    standard_augmented: list[float]

    def mean(self, arm: str) -> float:
        return float(np.mean(getattr(self, arm)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(
            ["arm", "n_real", "n_synth"] + [f"seed_{s}" for s in self.seeds] + ["mean"]
        )
        for arm, n_synth in (
            ("real_only", 0),
            ("gan_augmented", self.n_synth_per_class),
            ("standard_augmented", self.n_synth_per_class),
        ):
            accs = getattr(self, arm)
            writer.writerow(
                [arm, self.n_real_per_class, n_synth]
                + [f"{a:.4f}" for a in accs]
                + [f"{self.mean(arm):.4f}"]
            )
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path


def _base_subset(real: LabeledDataset, per_class: int, seed: int) -> LabeledDataset:
    chosen: list[int] = []
    for c, pool in enumerate(real.indices_by_class()):
        if len(pool) < per_class:
            raise ValueError(
                f"class {real.class_names[c]!r} has {len(pool)} real images, need {per_class}"
            )
        rng = np.random.default_rng((seed, c))
        take = rng.permutation(len(pool))[:per_class]
        chosen.extend(pool[i] for i in take)
    return real.subset(sorted(chosen))


def _augmented_copies(
    base: LabeledDataset, per_class: int, policy: AugmentPolicy, seed: int
) -> LabeledDataset:
    # replacement draws from the small pool: the only way to exceed its size
    items: list[tuple[np.ndarray, int]] = []
    for c, pool in enumerate(base.indices_by_class()):
        rng = np.random.default_rng((seed, c, 2))
        for i in range(per_class):
            src, _ = base[pool[int(rng.integers(len(pool)))]]
            items.append((augment_with_seed(src, policy, (seed, c, i, 3)), c))
    return LabeledDataset(items=items, class_names=base.class_names, provenance=base.provenance)


def augmentation_experiment(
    real: LabeledDataset,
    val: LabeledDataset,
    make_sampler: Callable[[int], object],
    classifier_cfg: ClassifierConfig,
    n_real_per_class: int = 20,
    n_synth_per_class: int = 100,
    seeds: Sequence[int] = (0, 1, 2),
    augment_policy: AugmentPolicy | None = None,
) -> AugmentationReport:
    """Train the same classifier on real-only, GAN-enlarged, and augmented sets.

    ``make_sampler`` builds a per-seed sample source (a trained generator, or a
    replay/noise stub for harness checks).  All three arms of one seed share
    the base subset and the classifier seed, so with ``n_synth_per_class`` of
    zero they collapse to the identical run.
    """
    if n_synth_per_class < 0:
        raise ValueError(f"n_synth_per_class must be >= 0, got {n_synth_per_class}")
    policy = augment_policy or AugmentPolicy()
    real_only: list[float] = []
    gan_aug: list[float] = []
    std_aug: list[float] = []
    for seed in seeds:
        base = _base_subset(real, n_real_per_class, seed)
        real_only.append(train_classifier(base, val, classifier_cfg, seed=seed).accuracy)

        if n_synth_per_class == 0:
            gan_train_set = base
            std_train_set = base
        else:
            bank = build_sample_bank(
                make_sampler(seed), real.n_classes, n_synth_per_class, real.class_names
            )
            gan_train_set = base.merged_with(bank.dataset)
            std_train_set = base.merged_with(
                _augmented_copies(base, n_synth_per_class, policy, seed)
            )
        gan_aug.append(train_classifier(gan_train_set, val, classifier_cfg, seed=seed).accuracy)
        std_aug.append(train_classifier(std_train_set, val, classifier_cfg, seed=seed).accuracy)
    return AugmentationReport(
        n_real_per_class=n_real_per_class,
        n_synth_per_class=n_synth_per_class,
        seeds=tuple(seeds),
        real_only=real_only,
        gan_augmented=gan_aug,
        standard_augmented=std_aug,
    )
