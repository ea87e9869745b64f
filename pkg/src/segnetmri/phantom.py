"""Synthetic brain phantoms, augmentation, patch cropping and volume I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ContainerFormatError,
    LabelError,
    ParameterError,
    ShapeError,
    VolumeNotFoundError,
    VolumeShapeMismatchError,
)

BACKGROUND, GM, WM, CSF = 0, 1, 2, 3
NUM_CLASSES = 4
CLASS_NAMES = ("background", "GM", "WM", "CSF")

# mean tissue intensity before normalization
_TISSUE_MEAN = {BACKGROUND: 0.0, GM: 0.55, WM: 0.85, CSF: 0.25}


@dataclass
class LabeledSample:
    """A complex image (zero phase by default) with its tissue label map."""

    image: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.labels = np.asarray(self.labels)
        if self.image.shape != self.labels.shape or self.image.ndim != 2:
            raise ShapeError(f"image {self.image.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise LabelError(f"labels must lie in 0..{NUM_CLASSES - 1}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.image)

    def copy(self) -> LabeledSample:
        return LabeledSample(self.image.copy(), self.labels.copy())


@dataclass
class DatasetSplit:
    train: list[LabeledSample]
    test: list[LabeledSample]
    seed: int
    train_seeds: list[int] = field(default_factory=list)
    test_seeds: list[int] = field(default_factory=list)


def _wavy_ellipse(yy, xx, cy, cx, ry, rx, angle, wobble) -> np.ndarray:
    """Normalized radius field of a rotated ellipse with a sinusoidal boundary.

    Pixels with value <= 1 lie inside.
    """
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    r = np.hypot(u, v)
    theta = np.arctan2(v, u)
    boundary = 1.0
    for amp, freq, phase in wobble:
        boundary = boundary + amp * np.sin(freq * theta + phase)
    return r / boundary


def generate_phantom(h: int, w: int, seed: int) -> LabeledSample:
    """Nested-ellipse brain phantom: GM ring, WM interior, CSF ventricles.

    The GM/WM interface is folded with random sinusoids so the GM ring has
    thin, irregular parts.
    """
    if h < 32 or w < 32:
        raise ParameterError(f"phantom needs h, w >= 32, got {h}x{w}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = h / 2 + rng.uniform(-0.03, 0.03) * h
    cx = w / 2 + rng.uniform(-0.03, 0.03) * w
    ry = h * rng.uniform(0.36, 0.42)
    rx = w * rng.uniform(0.30, 0.38)
    angle = rng.uniform(-0.25, 0.25)

    outer_wobble = [(rng.uniform(0.01, 0.03), rng.integers(3, 6), rng.uniform(0, 2 * np.pi))]
    head = _wavy_ellipse(yy, xx, cy, cx, ry, rx, angle, outer_wobble) <= 1.0

    inner_scale = rng.uniform(0.70, 0.78)
    folds = [
        (rng.uniform(0.04, 0.08), rng.integers(5, 10), rng.uniform(0, 2 * np.pi)),
        (rng.uniform(0.02, 0.04), rng.integers(11, 17), rng.uniform(0, 2 * np.pi)),
    ]
    wm = head & (
        _wavy_ellipse(yy, xx, cy, cx, ry * inner_scale, rx * inner_scale, angle, folds) <= 1.0
    )

    labels = np.zeros((h, w), dtype=np.int32)
    labels[head] = GM
    labels[wm] = WM

    n_ventricles = int(rng.integers(1, 4))
    for _ in range(n_ventricles):
        vy = cy + rng.uniform(-0.15, 0.15) * ry
        vx = cx + rng.uniform(-0.25, 0.25) * rx
        vry = ry * rng.uniform(0.25, 0.32)
        vrx = rx * rng.uniform(0.14, 0.20)
        vent = _wavy_ellipse(yy, xx, vy, vx, vry, vrx, rng.uniform(-0.6, 0.6), []) <= 1.0
        labels[vent & wm] = CSF

    means = np.array([_TISSUE_MEAN[c] for c in range(NUM_CLASSES)])
    means[1:] += rng.uniform(-0.03, 0.03, size=NUM_CLASSES - 1)
    image = means[labels]

    # smooth multiplicative shading inside the head
    field_ = np.zeros((h, w))
    for _ in range(3):
        ky, kx = rng.uniform(0.5, 2.0, size=2)
        field_ += np.sin(2 * np.pi * (ky * yy / h + kx * xx / w) + rng.uniform(0, 2 * np.pi))
    image = image * (1.0 + 0.03 * field_ / 3.0)
    image = image + rng.normal(0.0, 0.01, size=(h, w))
    image = np.clip(image, 0.0, None)
    image = image / image.max()
    return LabeledSample(image.astype(np.complex128), labels)


def make_phantom_split(n_train: int, n_test: int, h: int, w: int, seed: int) -> DatasetSplit:
    """Disjoint train/test phantom sets with per-sample seeds drawn from ``seed``."""
    if n_train < 0 or n_test < 0:
        raise ParameterError("dataset sizes must be non-negative")
    seeds = np.random.SeedSequence(seed).generate_state(n_train + n_test, dtype=np.uint32)
    seeds = [int(s) for s in seeds]
    # generate_state can in principle repeat; keep the split disjoint regardless
    if len(set(seeds)) != len(seeds):
        raise ParameterError(f"seed {seed} produced duplicate phantom seeds")
    train_seeds, test_seeds = seeds[:n_train], seeds[n_train:]
    return DatasetSplit(
        train=[generate_phantom(h, w, s) for s in train_seeds],
        test=[generate_phantom(h, w, s) for s in test_seeds],
        seed=seed,
        train_seeds=train_seeds,
        test_seeds=test_seeds,
    )


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(a)
    h, w = a.shape
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[dst_y, dst_x] = a[src_y, src_x]
    return out


def apply_transform(s: LabeledSample, flip: bool, rotations: int, shift: tuple[int, int]) -> LabeledSample:
    """Flip (left-right), rotate by ``90 * rotations`` degrees, then translate.

    Translation fills with zeros (background); labels and image move together.
    """
    out = []
    for a in (s.image, s.labels):
        if flip:
            a = a[:, ::-1]
        a = np.rot90(a, rotations)
        if shift != (0, 0):
            a = _shift(a, int(shift[0]), int(shift[1]))
        out.append(np.ascontiguousarray(a))
    return LabeledSample(*out)


def augment(s: LabeledSample, seed: int, max_shift: int = 5) -> LabeledSample:
    """Random flip / quarter-turn rotation / integer translation."""
    rng = np.random.default_rng(seed)
    flip = bool(rng.integers(0, 2))
    h, w = s.shape
    rotations = int(rng.integers(0, 4)) if h == w else 2 * int(rng.integers(0, 2))
    dy, dx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    return apply_transform(s, flip, rotations, (dy, dx))


def crop_patches(s: LabeledSample, size: int, count: int, seed: int) -> list[LabeledSample]:
    h, w = s.shape
    if size < 1 or size > min(h, w):
        raise ParameterError(f"patch size {size} does not fit a {h}x{w} sample")
    rng = np.random.default_rng(seed)
    ys = rng.integers(0, h - size + 1, size=count)
    xs = rng.integers(0, w - size + 1, size=count)
    return [
        LabeledSample(
            s.image[y : y + size, x : x + size].copy(),
            s.labels[y : y + size, x : x + size].copy(),
        )
        for y, x in zip(ys, xs)
    ]


def save_volume(path, samples: list[LabeledSample]) -> None:
    """Write samples as an H x W x K magnitude/label volume."""
    from .container import write_container

    if not samples:
        raise ParameterError("cannot save an empty volume")
    image = np.stack([np.abs(s.image) for s in samples], axis=-1).astype(np.float64)
    labels = np.stack([s.labels for s in samples], axis=-1).astype(np.int32)
    write_container(path, {"image": image, "labels": labels})


def load_volume(path) -> list[LabeledSample]:
    """Read an H x W x K volume file; intensities are scaled to [0, 1] by the volume max."""
    from .container import read_container

    path = Path(path)
    if not path.is_file():
        raise VolumeNotFoundError(f"no volume file at {path}")
    entries = read_container(path)
    for key in ("image", "labels"):
        if key not in entries:
            raise ContainerFormatError(f"{path}: missing entry {key!r}")
    image = np.asarray(entries["image"])
    labels = np.asarray(entries["labels"])
    if np.iscomplexobj(image):
        image = np.abs(image)
    if image.ndim == 2:
        image = image[..., None]
    if labels.ndim == 2:
        labels = labels[..., None]
    if image.shape != labels.shape or image.ndim != 3:
        raise VolumeShapeMismatchError(
            f"{path}: image {image.shape} and labels {labels.shape} disagree"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContainerFormatError(f"{path}: labels must be integers, got {labels.dtype}")
    image = image.astype(np.float64)
    peak = image.max()
    if peak > 0:
        image = image / peak
    return [
        LabeledSample(image[..., k].astype(np.complex128), labels[..., k].astype(np.int32))
        for k in range(image.shape[-1])
    ]
