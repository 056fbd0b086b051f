"""Datasets, preprocessing, and label-preserving augmentation.

Images live as float32 HWC arrays in [0, 1] with integer class labels; every
dataset carries a provenance tag ("real" or "generated") that the evaluation
protocol uses to police train/test isolation.  A procedural shape dataset
mirrors the skin-lesion class imbalance at a fraction of the size so the full
pipeline can run on one desk machine.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage
from torch import Tensor

__all__ = [
    "ISIC_CLASS_NAMES",
    "ISIC_CLASS_COUNTS",
    "CLASSIFIER_MEAN",
    "CLASSIFIER_STD",
    "LabeledDataset",
    "load_image_folder",
    "center_crop",
    "area_resize",
    "center_crop_resize",
    "AugmentPolicy",
    "AugmentParams",
    "sample_augment_params",
    "augment",
    "augment_with_seed",
    "isic_scaled_counts",
    "make_toy_dataset",
    "stratified_val_counts",
    "split_stratified",
    "normalize_for_classifier",
    "denormalize_from_classifier",
    "to_gan_range",
    "from_gan_range",
    "batch_tensor",
]

# 2018 skin-lesion challenge training set: per-class image counts
ISIC_CLASS_NAMES = ("MEL", "NV", "BCC", "AKIEC", "BKL", "DF", "VASC")
ISIC_CLASS_COUNTS = (1113, 6705, 514, 327, 1099, 115, 142)
ISIC_TOTAL = 10_015
ISIC_VAL_TOTAL = 501

CROP_SIZE = 450
FULL_RESOLUTION = 256

# ImageNet channel statistics, the convention pretrained-style classifiers expect
CLASSIFIER_MEAN = (0.485, 0.456, 0.406)
CLASSIFIER_STD = (0.229, 0.224, 0.225)

PROVENANCES = ("real", "generated", "mixed")


@dataclass
class LabeledDataset:
    """Float32 HWC images in [0, 1] with labels and a provenance tag."""

    items: list[tuple[np.ndarray, int]]
    class_names: tuple[str, ...]
    provenance: str = "real"

    def __post_init__(self) -> None:
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}, got {self.provenance!r}")
        for i, (img, label) in enumerate(self.items):
            if img.ndim != 3 or img.shape[2] != 3:
                raise ValueError(f"item {i}: images must be [H, W, 3], got {img.shape}")
            if not 0 <= label < len(self.class_names):
                raise ValueError(f"item {i}: label {label} out of range for {len(self.class_names)} classes")

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int) -> tuple[np.ndarray, int]:
        return self.items[i]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.items], dtype=np.int64)

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        return LabeledDataset(
            items=[self.items[i] for i in indices],
            class_names=self.class_names,
            provenance=self.provenance,
        )

    def merged_with(self, other: "LabeledDataset") -> "LabeledDataset":
        """Concatenate two datasets; differing provenances yield "mixed"."""
        if self.class_names != other.class_names:
            raise ValueError("cannot merge datasets with different class spaces")
        prov = self.provenance if self.provenance == other.provenance else "mixed"
        return LabeledDataset(
            items=self.items + other.items, class_names=self.class_names, provenance=prov
        )

    def indices_by_class(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.n_classes)]
        for i, (_, label) in enumerate(self.items):
            out[label].append(i)
        return out


def load_image_folder(
    root: str | Path, resolution: int | None = None, class_names: Sequence[str] | None = None
) -> LabeledDataset:
    """Read a <root>/<class>/<image> tree; class order is sorted directory order.

    Unreadable files are skipped with a warning; an empty class directory is an
    error because downstream per-class sampling would silently break.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if class_names is not None:
        by_name = {d.name: d for d in dirs}
        missing = [n for n in class_names if n not in by_name]
        if missing:
            raise FileNotFoundError(f"missing class directories under {root}: {missing}")
        dirs = [by_name[n] for n in class_names]
    if not dirs:
        raise FileNotFoundError(f"no class directories under {root}")
    items: list[tuple[np.ndarray, int]] = []
    skipped = 0
    for label, d in enumerate(dirs):
        n_before = len(items)
        for f in sorted(d.iterdir()):
            if not f.is_file():
                continue
            try:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            except Exception:
                skipped += 1
                continue
            if resolution is not None:
                arr = center_crop_resize(arr, out_size=resolution)
            items.append((arr, label))
        if len(items) == n_before:
            raise ValueError(f"class directory {d} holds no readable images")
    if skipped:
        warnings.warn(f"skipped {skipped} unreadable files under {root}", stacklevel=2)
    return LabeledDataset(items=items, class_names=tuple(d.name for d in dirs))


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if size > min(h, w):
        raise ValueError(f"crop {size} exceeds image size {h}x{w}")
    top = (h - size) // 2
    left = (w - size) // 2
    return img[top : top + size, left : left + size]


def _overlap_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out, n_in] matrix of exact pixel-interval overlaps."""
    scale = n_in / n_out
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        lo, hi = o * scale, (o + 1) * scale
        for i in range(int(math.floor(lo)), min(n_in, int(math.ceil(hi)))):
            w[o, i] = min(hi, i + 1) - max(lo, i)
    return w / scale


def area_resize(img: np.ndarray, out_size: int) -> np.ndarray:
    """Box-filter resample: each output pixel is the exact mean of its source area."""
    if img.ndim != 3:
        raise ValueError(f"expected [H, W, C], got {img.shape}")
    h, w = img.shape[:2]
    wy = _overlap_weights(h, out_size)
    wx = _overlap_weights(w, out_size)
    chw = np.moveaxis(img.astype(np.float64), 2, 0)
    out = wy @ chw @ wx.T
    return np.moveaxis(out, 0, 2).astype(np.float32)


def center_crop_resize(img: np.ndarray, crop: int | None = None, out_size: int = FULL_RESOLUTION) -> np.ndarray:
    """The standard preprocessing: square center crop, then area downsample."""
    if crop is None:
        crop = min(img.shape[:2])
    return area_resize(center_crop(img, crop), out_size)


@dataclass(frozen=True)
class AugmentPolicy:
    """Ranges for the label-preserving transforms; each fires independently."""

    rotation_degrees: float = 90.0
    flip_horizontal: bool = True
    flip_vertical: bool = True
    scale_range: tuple[float, float] = (0.9, 1.1)
    skew: float = 0.2
    prob: float = 0.5

    def __post_init__(self) -> None:
        if self.rotation_degrees < 0:
            raise ValueError("rotation_degrees must be >= 0")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError(f"bad scale_range {self.scale_range}")
        if not (0.0 <= self.prob <= 1.0):
            raise ValueError(f"prob must be in [0, 1], got {self.prob}")


@dataclass(frozen=True)
class AugmentParams:
    """One concrete draw from a policy; None means the transform is skipped."""

    rotation: float | None = None
    flip_h: bool = False
    flip_v: bool = False
    scale: float | None = None
    skew: float | None = None


def sample_augment_params(policy: AugmentPolicy, rng: np.random.Generator) -> AugmentParams:
    def fires() -> bool:
        return rng.random() < policy.prob

    rotation = None
    if policy.rotation_degrees > 0 and fires():
        rotation = float(rng.uniform(-policy.rotation_degrees, policy.rotation_degrees))
    flip_h = policy.flip_horizontal and fires()
    flip_v = policy.flip_vertical and fires()
    scale = None
    if fires():
        scale = float(rng.uniform(*policy.scale_range))
    skew = None
    if policy.skew > 0 and fires():
        skew = float(rng.uniform(-policy.skew, policy.skew))
    return AugmentParams(rotation=rotation, flip_h=flip_h, flip_v=flip_v, scale=scale, skew=skew)


def _affine_channels(img: np.ndarray, mat2: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Apply an inverse-mapping 2x2 matrix about the image center, channels fixed."""
    mat3 = np.eye(3)
    mat3[:2, :2] = mat2
    offset = np.zeros(3)
    offset[:2] = center - mat2 @ center
    out = ndimage.affine_transform(img, mat3, offset=offset, order=1, mode="reflect")
    return out.astype(np.float32)


def rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counterclockwise; rotate_image(x, 90) matches np.rot90(x)."""
    a = math.radians(degrees)
    # affine_transform wants the inverse (output -> input) map
    mat = np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])
    center = (np.array(img.shape[:2], dtype=np.float64) - 1) / 2
    return _affine_channels(img, mat, center)


def scale_image(img: np.ndarray, factor: float) -> np.ndarray:
    """Zoom about the center; factor > 1 magnifies."""
    if factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    mat = np.eye(2) / factor
    center = (np.array(img.shape[:2], dtype=np.float64) - 1) / 2
    return _affine_channels(img, mat, center)


def shear_image(img: np.ndarray, k: float) -> np.ndarray:
    """Horizontal shear by factor k about the center."""
    mat = np.array([[1.0, 0.0], [k, 1.0]])
    center = (np.array(img.shape[:2], dtype=np.float64) - 1) / 2
    return _affine_channels(img, mat, center)


def augment(img: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Apply one parameter draw; the label never changes."""
    out = img
    if params.rotation is not None:
        out = rotate_image(out, params.rotation)
    if params.flip_h:
        out = out[:, ::-1].copy()
    if params.flip_v:
        out = out[::-1].copy()
    if params.scale is not None:
        out = scale_image(out, params.scale)
    if params.skew is not None:
        out = shear_image(out, params.skew)
    return np.clip(out, 0.0, 1.0)


def augment_with_seed(img: np.ndarray, policy: AugmentPolicy, seed: Sequence[int] | int) -> np.ndarray:
    """Deterministic augmentation keyed by an explicit seed (resumable loops)."""
    rng = np.random.default_rng(seed)
    return augment(img, sample_augment_params(policy, rng))


def isic_scaled_counts(divisor: int = 16) -> tuple[int, ...]:
    """Per-class counts shrunk by a divisor, keeping the imbalance ratios."""
    if divisor < 1:
        raise ValueError(f"divisor must be >= 1, got {divisor}")
    return tuple(max(1, round(c / divisor)) for c in ISIC_CLASS_COUNTS)


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    rgb = np.zeros(h.shape + (3,), dtype=np.float64)
    lut = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    for idx, (r_, g_, b_) in enumerate(lut):
        m = i == idx
        rgb[m, 0], rgb[m, 1], rgb[m, 2] = r_[m], g_[m], b_[m]
    return rgb


def _shape_mask(class_idx: int, xx: np.ndarray, yy: np.ndarray, size: float) -> np.ndarray:
    r = np.sqrt(xx**2 + yy**2)
    if class_idx % 7 == 0:  # disk
        return r <= size
    if class_idx % 7 == 1:  # square
        return np.maximum(np.abs(xx), np.abs(yy)) <= size
    if class_idx % 7 == 2:  # ring
        return (r <= size) & (r >= 0.55 * size)
    if class_idx % 7 == 3:  # cross
        arm = 0.35 * size
        return ((np.abs(xx) <= arm) & (np.abs(yy) <= size)) | (
            (np.abs(yy) <= arm) & (np.abs(xx) <= size)
        )
    if class_idx % 7 == 4:  # triangle
        return (yy <= size) & (np.abs(xx) <= (size - yy) * 0.6)
    if class_idx % 7 == 5:  # striped disk
        return (r <= size) & (np.sin(xx * 14.0) > 0)
    # dotted disk
    spots = (np.sin(xx * 11.0) * np.sin(yy * 11.0)) > 0.3
    return (r <= size) & spots


def make_toy_dataset(
    counts: Sequence[int] | None = None,
    resolution: int = 32,
    seed: int = 0,
    class_names: Sequence[str] | None = None,
) -> LabeledDataset:
    """Procedural shape images, one shape family and hue band per class.

    Every sample is fully determined by (seed, class, index): geometry jitter,
    rotation, and hue wobble come from a per-sample child generator, and the
    shapes are drawn on a 4x supersampled grid then box-averaged down.
    """
    if counts is None:
        counts = isic_scaled_counts()
    if class_names is None:
        class_names = ISIC_CLASS_NAMES[: len(counts)] if len(counts) <= 7 else tuple(
            f"class{i}" for i in range(len(counts))
        )
    if len(class_names) != len(counts):
        raise ValueError(f"{len(counts)} counts but {len(class_names)} class names")
    ss = 4
    n = resolution * ss
    axis = np.linspace(-1.0, 1.0, n)
    base_yy, base_xx = np.meshgrid(axis, axis, indexing="ij")
    items: list[tuple[np.ndarray, int]] = []
    for label, count in enumerate(counts):
        for idx in range(count):
            rng = np.random.default_rng((seed, label, idx))
            cx, cy = rng.uniform(-0.25, 0.25, size=2)
            size = rng.uniform(0.45, 0.7)
            angle = rng.uniform(0.0, 2 * np.pi)
            ca, sa = np.cos(angle), np.sin(angle)
            xx = (base_xx - cx) * ca - (base_yy - cy) * sa
            yy = (base_xx - cx) * sa + (base_yy - cy) * ca
            mask = _shape_mask(label, xx, yy, size)
            hue = (label / len(counts) + rng.uniform(-0.025, 0.025)) % 1.0
            sat = np.where(mask, 0.85, 0.25)
            val = np.where(mask, rng.uniform(0.75, 0.95), 0.12)
            rgb = _hsv_to_rgb(np.full(mask.shape, hue), sat, val)
            small = rgb.reshape(resolution, ss, resolution, ss, 3).mean(axis=(1, 3))
            items.append((small.astype(np.float32), label))
    return LabeledDataset(items=items, class_names=tuple(class_names))


def stratified_val_counts(counts: Sequence[int], val_total: int) -> tuple[int, ...]:
    """Per-class validation sizes proportional to class frequency, summing exactly.

    Nearest-integer shares first, then the largest-remainder rule settles any
    difference from the requested total.
    """
    total = sum(counts)
    if val_total < 0 or val_total > total:
        raise ValueError(f"val_total must be in [0, {total}], got {val_total}")
    exact = [c * val_total / total for c in counts]
    out = [min(int(round(e)), c) for e, c in zip(exact, counts)]
    diff = val_total - sum(out)
    order = sorted(range(len(counts)), key=lambda i: exact[i] - math.floor(exact[i]), reverse=diff > 0)
    j = 0
    while diff != 0:
        i = order[j % len(counts)]
        if diff > 0 and out[i] < counts[i]:
            out[i] += 1
            diff -= 1
        elif diff < 0 and out[i] > 0:
            out[i] -= 1
            diff += 1
        j += 1
    return tuple(out)


def split_stratified(
    dataset: LabeledDataset, val_total: int, seed: int = 0
) -> tuple[LabeledDataset, LabeledDataset]:
    """Class-proportional train/validation split, deterministic per seed."""
    rng = np.random.default_rng(seed)
    per_class = stratified_val_counts(tuple(dataset.counts()), val_total)
    train_idx: list[int] = []
    val_idx: list[int] = []
    for cls, members in enumerate(dataset.indices_by_class()):
        members = np.array(members)
        perm = rng.permutation(len(members))
        take = per_class[cls]
        val_idx.extend(members[perm[:take]].tolist())
        train_idx.extend(members[perm[take:]].tolist())
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(val_idx))


def _stats(device=None) -> tuple[Tensor, Tensor]:
    mean = torch.tensor(CLASSIFIER_MEAN).reshape(1, 3, 1, 1)
    std = torch.tensor(CLASSIFIER_STD).reshape(1, 3, 1, 1)
    return mean, std


def normalize_for_classifier(x: Tensor) -> Tensor:
    """Standardize [N, 3, H, W] images in [0, 1] with the fixed channel stats."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected [N, 3, H, W], got {tuple(x.shape)}")
    mean, std = _stats()
    return (x - mean) / std


def denormalize_from_classifier(x: Tensor) -> Tensor:
    mean, std = _stats()
    return x * std + mean


def to_gan_range(x: Tensor) -> Tensor:
    """[0, 1] images to the [-1, 1] range the networks train in."""
    return x * 2.0 - 1.0


def from_gan_range(x: Tensor) -> Tensor:
    """Network outputs back to clipped [0, 1] images."""
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


def batch_tensor(dataset: LabeledDataset, indices: Sequence[int]) -> tuple[Tensor, Tensor]:
    """Stack items into ([N, 3, H, W] in [0, 1], labels); sizes must agree."""
    imgs, labels = [], []
    shape = None
    for i in indices:
        img, label = dataset[i]
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise ValueError(f"mixed image sizes in batch: {shape} vs {img.shape}")
        imgs.append(torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1))
        labels.append(label)
    return torch.stack(imgs), torch.tensor(labels, dtype=torch.long)
