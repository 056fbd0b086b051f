"""Progressive adversarial training with two-timescale updates.

One step = ``d_g_step_ratio`` critic updates followed by one generator update.
The growth schedule is read once at the top of each step from the running
count of real images shown.  All stochastic draws (batch indices, latents,
interpolation mixes, augmentation seeds) come from a dedicated generator whose
state rides along in checkpoints, so a resumed run replays the exact sample
stream of an uninterrupted one.
"""

from __future__ import annotations

import base64
import csv
import math
import time
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentPolicy, LabeledDataset, augment_with_seed, batch_tensor, to_gan_range
from .layers import downsample2x
from .losses import discriminator_loss, generator_loss
from .networks import Discriminator, FadeState, Generator, NetworkSpec, StageSpec
from .schedule import ADAM_BETAS, ADAM_EPS, ScheduleState, TrainConfig, schedule_at

__all__ = ["Trainer", "TrainingDiverged", "METRIC_FIELDS", "load_generator"]

METRIC_FIELDS = (
    "step",
    "images_shown",
    "stage",
    "alpha",
    "resolution",
    "d_loss",
    "g_loss",
    "gp",
    "wall_time",
)

# config fields that must agree between a checkpoint and the resuming run;
# budget-style fields (total_images, checkpoint cadence) may legitimately change
_RESUME_CRITICAL = (
    "images_per_phase",
    "lr_g",
    "lr_d",
    "lr_ratio",
    "d_g_step_ratio",
    "gp_weight",
    "drift_weight",
    "batch_by_resolution",
    "seed",
    "augment_reals",
)


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; names the last usable checkpoint."""


def _spec_meta(spec: NetworkSpec) -> dict:
    return {
        "stages": [
            {"resolution": s.resolution, "channels": s.channels, "has_attention": s.has_attention}
            for s in spec.stages
        ],
        "latent_dim": spec.latent_dim,
        "n_classes": spec.n_classes,
        "attention_in": spec.attention_in,
    }


def spec_from_meta(meta: dict) -> NetworkSpec:
    return NetworkSpec(
        stages=tuple(
            StageSpec(
                resolution=s["resolution"],
                channels=s["channels"],
                has_attention=s["has_attention"],
            )
            for s in meta["stages"]
        ),
        latent_dim=meta["latent_dim"],
        n_classes=meta["n_classes"],
        attention_in=meta["attention_in"],
    )


def load_generator(path: str | Path) -> tuple[Generator, dict]:
    """Restore just the generator for sampling; returns it with checkpoint meta."""
    tensors, meta = load_checkpoint(path)
    g = Generator(spec_from_meta(meta["spec"]))
    g.load_state_dict({k[2:]: v for k, v in tensors.items() if k.startswith("g.")})
    g.eval()
    return g, meta


def _encode_rng(g: torch.Generator) -> str:
    return base64.b64encode(g.get_state().numpy().tobytes()).decode("ascii")


def _decode_rng(s: str) -> Tensor:
    return torch.from_numpy(np.frombuffer(base64.b64decode(s), dtype=np.uint8).copy())


class Trainer:
    """Owns the network pair, optimizers, and the growth clock."""

    def __init__(
        self,
        spec: NetworkSpec,
        cfg: TrainConfig,
        dataset: LabeledDataset,
        out_dir: str | Path,
        augment_policy: AugmentPolicy | None = None,
    ):
        self.spec = spec
        self.cfg = cfg
        self.dataset = dataset
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.augment_policy = augment_policy or AugmentPolicy()
        self._validate_dataset()

        torch.manual_seed(cfg.seed)
        self.g = Generator(spec)
        self.d = Discriminator(spec)
        lr_g, lr_d = cfg.effective_lrs()
        self.opt_g = torch.optim.Adam(self.g.parameters(), lr=lr_g, betas=ADAM_BETAS, eps=ADAM_EPS)
        self.opt_d = torch.optim.Adam(self.d.parameters(), lr=lr_d, betas=ADAM_BETAS, eps=ADAM_EPS)
        self.sample_rng = torch.Generator().manual_seed(cfg.seed + 1)
        self.images_shown = 0
        self.step_count = 0
        self.last_checkpoint: Path | None = None
        self._metrics_path = self.out_dir / "metrics.csv"
        max_batch = max(cfg.batch_by_resolution.get(s.resolution, 1) for s in spec.stages)
        if len(dataset) < max_batch:
            warnings.warn(
                f"dataset holds {len(dataset)} images but batches reach {max_batch}; "
                "sampling with replacement",
                stacklevel=2,
            )

    def _validate_dataset(self) -> None:
        if len(self.dataset) == 0:
            raise ValueError("dataset is empty")
        h, w = self.dataset[0][0].shape[:2]
        if h != w or (h & (h - 1)) != 0:
            raise ValueError(f"training images must be square powers of two, got {h}x{w}")
        if h < self.spec.max_resolution:
            raise ValueError(
                f"dataset resolution {h} is below the network's {self.spec.max_resolution}"
            )
        if self.dataset.n_classes != self.spec.n_classes:
            raise ValueError(
                f"dataset has {self.dataset.n_classes} classes, network expects {self.spec.n_classes}"
            )
        self._data_resolution = h

    # -- sampling ----------------------------------------------------------

    def schedule_now(self) -> ScheduleState:
        return schedule_at(
            self.images_shown,
            self.spec.n_stages,
            self.cfg.images_per_phase,
            self.cfg.batch_by_resolution,
        )

    def _real_batch(self, sched: ScheduleState) -> tuple[Tensor, Tensor]:
        n = sched.batch_size
        idx = torch.randint(len(self.dataset), (n,), generator=self.sample_rng).tolist()
        if self.cfg.augment_reals:
            items = []
            for slot, i in enumerate(idx):
                img, label = self.dataset[i]
                img = augment_with_seed(
                    img, self.augment_policy, (self.cfg.seed, self.images_shown, slot)
                )
                items.append((img, label))
            tmp = LabeledDataset(
                items=items,
                class_names=self.dataset.class_names,
                provenance=self.dataset.provenance,
            )
            x, labels = batch_tensor(tmp, range(n))
        else:
            x, labels = batch_tensor(self.dataset, idx)
        x = to_gan_range(x)
        for _ in range(int(math.log2(self._data_resolution // sched.resolution))):
            x = downsample2x(x)
        return x, labels

    def _latents(self, n: int) -> Tensor:
        return torch.randn(n, self.spec.latent_dim, generator=self.sample_rng)

    # -- one optimization step --------------------------------------------

    def step(self) -> dict:
        start = time.monotonic()
        sched = self.schedule_now()
        fade = FadeState(sched.stage_index, sched.alpha)
        labels = None
        d_loss_val = gp_val = 0.0
        for _ in range(self.cfg.d_g_step_ratio):
            real, labels = self._real_batch(sched)
            z = self._latents(sched.batch_size)
            with torch.no_grad():
                fake = self.g(z, labels, fade)
            critic = lambda x: self.d(x, labels, fade)  # noqa: E731
            u = torch.rand(
                (real.shape[0],) + (1,) * (real.ndim - 1), generator=self.sample_rng
            )
            loss_d, parts = discriminator_loss(
                critic,
                real,
                fake,
                gp_weight=self.cfg.gp_weight,
                drift_weight=self.cfg.drift_weight,
                u=u,
            )
            self.opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            self.opt_d.step()
            d_loss_val, gp_val = loss_d.item(), parts["gp"]
            self.images_shown += sched.batch_size
        z = self._latents(sched.batch_size)
        fake = self.g(z, labels, fade)
        loss_g = generator_loss(lambda x: self.d(x, labels, fade), fake)
        self.opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        self.opt_g.step()
        self.step_count += 1
        g_loss_val = loss_g.item()
        if not (math.isfinite(d_loss_val) and math.isfinite(g_loss_val)):
            where = self.last_checkpoint or "none"
            raise TrainingDiverged(
                f"non-finite loss at step {self.step_count} "
                f"(d={d_loss_val}, g={g_loss_val}); last checkpoint: {where}"
            )
        return {
            "step": self.step_count,
            "images_shown": self.images_shown,
            "stage": sched.stage_index,
            "alpha": sched.alpha,
            "resolution": sched.resolution,
            "d_loss": d_loss_val,
            "g_loss": g_loss_val,
            "gp": gp_val,
            "wall_time": time.monotonic() - start,
        }

    # -- persistence -------------------------------------------------------

    def _optimizer_tensors(self, opt: torch.optim.Adam, module: torch.nn.Module, prefix: str):
        # Step counts differ per parameter: blocks that joined at a later fade
        # have seen fewer updates, and Adam's bias correction depends on it.
        tensors: dict[str, Tensor] = {}
        named = dict(module.named_parameters())
        for name, p in named.items():
            state = opt.state.get(p)
            if state:
                tensors[f"{prefix}.{name}.exp_avg"] = state["exp_avg"]
                tensors[f"{prefix}.{name}.exp_avg_sq"] = state["exp_avg_sq"]
                tensors[f"{prefix}.{name}.step"] = state["step"].detach().clone()
        return tensors

    def save(self, path: str | Path | None = None) -> Path:
        if path is None:
            path = self.out_dir / f"ckpt_{self.images_shown:08d}.ckpt"
        path = Path(path)
        tensors: dict[str, Tensor] = {}
        for prefix, module in (("g", self.g), ("d", self.d)):
            for name, t in module.state_dict().items():
                tensors[f"{prefix}.{name}"] = t
        tensors.update(self._optimizer_tensors(self.opt_g, self.g, "opt_g"))
        tensors.update(self._optimizer_tensors(self.opt_d, self.d, "opt_d"))
        meta = {
            "images_shown": self.images_shown,
            "step_count": self.step_count,
            "sample_rng": _encode_rng(self.sample_rng),
            "config": asdict(self.cfg),
            "spec": _spec_meta(self.spec),
        }
        save_checkpoint(path, tensors, meta)
        self.last_checkpoint = path
        return path

    @classmethod
    def load(
        cls,
        path: str | Path,
        cfg: TrainConfig,
        dataset: LabeledDataset,
        out_dir: str | Path,
        augment_policy: AugmentPolicy | None = None,
    ) -> "Trainer":
        tensors, meta = load_checkpoint(path)
        saved_cfg = meta["config"]
        current = asdict(cfg)
        # batch maps come back with string keys after the JSON round trip
        saved_batches = {int(k): v for k, v in saved_cfg["batch_by_resolution"].items()}
        saved_cfg = {**saved_cfg, "batch_by_resolution": saved_batches}
        mismatched = [
            k for k in _RESUME_CRITICAL if saved_cfg.get(k) != current.get(k)
        ]
        if mismatched:
            detail = ", ".join(
                f"{k}: checkpoint={saved_cfg.get(k)!r} run={current.get(k)!r}" for k in mismatched
            )
            raise ValueError(f"checkpoint config does not match the resuming run: {detail}")
        spec = spec_from_meta(meta["spec"])
        trainer = cls(spec, cfg, dataset, out_dir, augment_policy=augment_policy)
        g_state = {k[2:]: v for k, v in tensors.items() if k.startswith("g.")}
        d_state = {k[2:]: v for k, v in tensors.items() if k.startswith("d.")}
        trainer.g.load_state_dict(g_state)
        trainer.d.load_state_dict(d_state)
        trainer._restore_optimizer(trainer.opt_g, trainer.g, tensors, "opt_g")
        trainer._restore_optimizer(trainer.opt_d, trainer.d, tensors, "opt_d")
        trainer.sample_rng.set_state(_decode_rng(meta["sample_rng"]))
        trainer.images_shown = meta["images_shown"]
        trainer.step_count = meta["step_count"]
        trainer.last_checkpoint = Path(path)
        return trainer

    @staticmethod
    def _restore_optimizer(opt, module, tensors: dict[str, Tensor], prefix: str) -> None:
        for name, p in module.named_parameters():
            avg_key = f"{prefix}.{name}.exp_avg"
            if avg_key not in tensors:
                continue
            opt.state[p] = {
                "step": tensors[f"{prefix}.{name}.step"].clone().reshape(()),
                "exp_avg": tensors[avg_key].clone(),
                "exp_avg_sq": tensors[f"{prefix}.{name}.exp_avg_sq"].clone(),
            }

    # -- driver ------------------------------------------------------------

    def _append_metrics(self, rows: list[dict]) -> None:
        new_file = not self._metrics_path.exists()
        with open(self._metrics_path, "a", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
            if new_file:
                writer.writeheader()
            writer.writerows(rows)

    def train(self, max_steps: int | None = None, log_every: int = 50) -> list[dict]:
        """Run until the image budget (or ``max_steps``) is spent; returns metrics."""
        history: list[dict] = []
        pending: list[dict] = []
        next_checkpoint = (
            self.images_shown + self.cfg.checkpoint_every_images
            if self.cfg.checkpoint_every_images
            else None
        )
        while self.images_shown < self.cfg.total_images:
            if max_steps is not None and self.step_count >= max_steps:
                break
            row = self.step()
            history.append(row)
            pending.append(row)
            if len(pending) >= log_every:
                self._append_metrics(pending)
                pending = []
            if next_checkpoint is not None and self.images_shown >= next_checkpoint:
                self.save()
                next_checkpoint = self.images_shown + self.cfg.checkpoint_every_images
        if pending:
            self._append_metrics(pending)
        self.save()
        return history
