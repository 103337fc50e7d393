"""Polar-domain augmentation: mirror, rotation, intensity manipulation, and
radial scaling. Geometric transforms are Cartesian concepts executed on the
polar grid: rotation is a circular angular shift, mirroring an angular
reversal, spatial scaling a radial resampling about the catheter center."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import OUTSIDE, LabelMap, PolarImage
from .errors import ScaleOutOfRange


@dataclass
class AugmentConfig:
    include_prob: float = 0.5
    gain_range: tuple[float, float] = (0.8, 1.25)
    offset_range: tuple[float, float] = (-0.1, 0.1)
    zoom_range: tuple[float, float] = (0.9, 1.1)


@dataclass
class AugmentPlan:
    mirror: bool = False
    rotation: int | None = None
    gains: np.ndarray | None = None
    offsets: np.ndarray | None = None
    zoom: float | None = None

    @property
    def empty(self) -> bool:
        return (not self.mirror and self.rotation is None
                and self.gains is None and self.zoom is None)


def sample_plan(seed: int, a_lines: int, config: AugmentConfig | None = None) -> AugmentPlan:
    """Draw a random augmentation subset; each transform is included
    independently with probability 0.5, parameters uniform in their ranges."""
    config = config or AugmentConfig()
    rng = np.random.default_rng(seed)
    plan = AugmentPlan()
    if rng.random() < config.include_prob:
        plan.mirror = True
    if rng.random() < config.include_prob:
        plan.rotation = int(rng.integers(0, a_lines))
    if rng.random() < config.include_prob:
        plan.gains = rng.uniform(*config.gain_range, size=3)
        plan.offsets = rng.uniform(*config.offset_range, size=3)
    if rng.random() < config.include_prob:
        plan.zoom = float(rng.uniform(*config.zoom_range))
    return plan


def _mirror_index(a_lines: int) -> np.ndarray:
    return (-np.arange(a_lines)) % a_lines


def _zoom_labels(cls: np.ndarray, zoom: float) -> np.ndarray:
    r_samples = cls.shape[0]
    src = np.clip(np.floor(np.arange(r_samples) / zoom + 0.5).astype(np.int64),
                  0, r_samples - 1)
    return cls[src, :]


def _zoom_image(channels: np.ndarray, zoom: float) -> np.ndarray:
    r_samples = channels.shape[1]
    x = np.arange(r_samples) / zoom
    i0 = np.clip(np.floor(x).astype(np.int64), 0, r_samples - 1)
    i1 = np.clip(i0 + 1, 0, r_samples - 1)
    frac = np.clip(x - i0, 0.0, 1.0)[None, :, None]
    return (1.0 - frac) * channels[:, i0, :] + frac * channels[:, i1, :]


def apply(plan: AugmentPlan, image: PolarImage, labels: LabelMap) -> tuple[PolarImage, LabelMap]:
    """Apply a plan to an image/label pair; labels stay a valid LabelMap.

    Transform order is mirror, rotation, scaling, intensity. Raises
    ScaleOutOfRange when the zoom pushes the vessel's outer boundary past
    the radial grid (callers resample the plan).
    """
    channels = image.channels.astype(np.float32, copy=True)
    cls = labels.classes.copy()
    a_lines = cls.shape[1]

    if plan.mirror:
        idx = _mirror_index(a_lines)
        channels = channels[:, :, idx]
        cls = cls[:, idx]
    if plan.rotation is not None:
        channels = np.roll(channels, plan.rotation, axis=2)
        cls = np.roll(cls, plan.rotation, axis=1)
    if plan.zoom is not None:
        cls = _zoom_labels(cls, plan.zoom)
        if np.any(cls[-1, :] != OUTSIDE):
            raise ScaleOutOfRange(f"zoom {plan.zoom:.3f} pushes the wall beyond the grid")
        channels = _zoom_image(channels, plan.zoom).astype(np.float32)
    if plan.gains is not None:
        for c in range(3):
            span = float(channels[c].max() - channels[c].min())
            channels[c] = channels[c] * plan.gains[c] + plan.offsets[c] * span
        channels[0] = np.clip(channels[0], 0.0, None)
        channels[2] = np.clip(channels[2], 0.0, 1.0)

    return (PolarImage(channels.astype(np.float32), image.pixel_pitch_um),
            LabelMap(cls))


def apply_random(image: PolarImage, labels: LabelMap, seed: int,
                 config: AugmentConfig | None = None,
                 max_tries: int = 8) -> tuple[PolarImage, LabelMap]:
    """Sample-and-apply with plan resampling on ScaleOutOfRange."""
    for attempt in range(max_tries):
        plan = sample_plan(seed + attempt, labels.shape[1], config)
        try:
            return apply(plan, image, labels)
        except ScaleOutOfRange:
            continue
    return apply(AugmentPlan(), image, labels)
