"""Growth schedule and training hyperparameters.

Training is measured in real images shown to the discriminator.  The run is
split into equal-length phases that alternate stabilize / fade: phase 0 trains
the 4x4 stage, each odd phase fades the next stage in with alpha ramping 0 to
1, and each even phase trains the freshly added stage at alpha 1.  Once every
phase is spent the final stage just keeps training.

Batch sizes follow resolution.  The reference map is the large-memory one;
``desk_batch_map`` scales it down for a single-box run while keeping the
shrink-with-resolution shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

__all__ = [
    "FULL_SCALE_BATCH_MAP",
    "desk_batch_map",
    "TrainConfig",
    "ScheduleState",
    "schedule_at",
    "n_phases",
]

FULL_SCALE_BATCH_MAP = {4: 256, 8: 256, 16: 128, 32: 64, 64: 32, 128: 16, 256: 8}

ADAM_BETAS = (0.0, 0.99)
ADAM_EPS = 1e-8


def desk_batch_map(divisor: int = 16, floor: int = 4) -> dict[int, int]:
    """Reference batch map divided down for small-memory runs."""
    if divisor < 1 or floor < 1:
        raise ValueError(f"divisor and floor must be >= 1, got {divisor}, {floor}")
    return {res: max(floor, b // divisor) for res, b in FULL_SCALE_BATCH_MAP.items()}


@dataclass(frozen=True)
class TrainConfig:
    """Everything the training loop needs beyond the network spec."""

    total_images: int = 24_000
    images_per_phase: int = 4_000
    lr_g: float = 1e-3
    lr_d: float = 4e-3
    lr_ratio: float | None = None  # if set, lr_d is derived as lr_ratio * lr_g
    d_g_step_ratio: int = 1
    gp_weight: float = 10.0
    drift_weight: float = 1e-3
    batch_by_resolution: dict[int, int] = field(default_factory=desk_batch_map)
    seed: int = 0
    checkpoint_every_images: int = 0  # 0 = only the final checkpoint
    augment_reals: bool = False

    def __post_init__(self) -> None:
        if self.total_images < 0:
            raise ValueError(f"total_images must be >= 0, got {self.total_images}")
        if self.images_per_phase < 1:
            raise ValueError(f"images_per_phase must be >= 1, got {self.images_per_phase}")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError(f"learning rates must be positive, got {self.lr_g}, {self.lr_d}")
        if self.lr_ratio is not None and self.lr_ratio <= 0:
            raise ValueError(f"lr_ratio must be positive, got {self.lr_ratio}")
        if self.d_g_step_ratio < 1:
            raise ValueError(f"d_g_step_ratio must be >= 1, got {self.d_g_step_ratio}")
        if self.gp_weight < 0 or self.drift_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if self.checkpoint_every_images < 0:
            raise ValueError("checkpoint_every_images must be >= 0")
        for res, b in self.batch_by_resolution.items():
            if b < 1:
                raise ValueError(f"batch size for {res}px must be >= 1, got {b}")

    def effective_lrs(self) -> tuple[float, float]:
        """(lr_g, lr_d) with the ratio applied when one is configured."""
        if self.lr_ratio is not None:
            return self.lr_g, self.lr_ratio * self.lr_g
        return self.lr_g, self.lr_d

    def batch_size(self, resolution: int) -> int:
        try:
            return self.batch_by_resolution[resolution]
        except KeyError:
            raise ValueError(f"no batch size configured for resolution {resolution}") from None


@dataclass(frozen=True)
class ScheduleState:
    """Snapshot of the growth schedule after a given number of real images."""

    images_shown: int
    phase: int
    phase_kind: str  # "stabilize" | "fade"
    stage_index: int
    alpha: float
    resolution: int
    batch_size: int


def n_phases(n_stages: int) -> int:
    """One stabilize phase per stage plus one fade phase per transition."""
    if n_stages < 1:
        raise ValueError(f"n_stages must be >= 1, got {n_stages}")
    return 2 * n_stages - 1


def schedule_at(
    images_shown: int,
    n_stages: int,
    images_per_phase: int,
    batch_by_resolution: dict[int, int],
    base_resolution: int = 4,
) -> ScheduleState:
    """Map an image count to (phase, stage, alpha, batch size)."""
    if images_shown < 0:
        raise ValueError(f"images_shown must be >= 0, got {images_shown}")
    if images_per_phase < 1:
        raise ValueError(f"images_per_phase must be >= 1, got {images_per_phase}")
    total_phases = n_phases(n_stages)
    phase = images_shown // images_per_phase
    if phase >= total_phases:
        # schedule exhausted: the last stage keeps stabilizing
        phase = total_phases - 1
    if phase == 0 or phase % 2 == 0:
        kind = "stabilize"
        stage = phase // 2 if phase else 0
        alpha = 1.0
    else:
        kind = "fade"
        stage = (phase + 1) // 2
        alpha = (images_shown - phase * images_per_phase) / images_per_phase
    resolution = base_resolution << stage
    try:
        batch = batch_by_resolution[resolution]
    except KeyError:
        raise ValueError(f"no batch size configured for resolution {resolution}") from None
    return ScheduleState(
        images_shown=images_shown,
        phase=phase,
        phase_kind=kind,
        stage_index=stage,
        alpha=alpha,
        resolution=resolution,
        batch_size=batch,
    )
