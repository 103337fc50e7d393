"""Synthetic labeled vessel phantoms on the polar grid.

Phantoms stand in for clinical pullbacks: a layered wall (lumen, intima,
media, outside) with smooth harmonic contours, guidewire/plaque shadow
wedges, per-class channel contrast, and speckle-like noise. Degraded label
variants for critic training come from :func:`perturb_labels`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import (
    GSHADOW,
    NUM_CLASSES,
    PSHADOW,
    AnnotationSet,
    LabelMap,
    PolarImage,
    contours_to_labels,
    labels_to_annotation,
    save_record,
    wedge_columns,
    write_manifest,
)
from .errors import InfeasibleGeometry

# per-class (intensity, birefringence, depolarization) means, class codes 1..6
DEFAULT_CONTRAST = np.array([
    [0.30, 0.30, 0.55],   # outside
    [0.05, 0.05, 0.08],   # lumen
    [0.85, 0.35, 0.15],   # intima
    [0.55, 0.85, 0.25],   # media
    [0.45, 0.10, 0.90],   # g-shadow
    [0.90, 0.55, 0.70],   # p-shadow
], dtype=np.float64)


@dataclass
class PhantomConfig:
    r_samples: int = 64
    a_lines: int = 128
    lumen_radius_range: tuple[float, float] = (14.0, 22.0)
    intima_thickness_range: tuple[float, float] = (4.0, 9.0)
    media_thickness_range: tuple[float, float] = (4.0, 9.0)
    wedge_count_range: tuple[int, int] = (1, 3)
    wedge_width_range: tuple[int, int] = (7, 14)
    noise_level: float = 1.0
    channel_contrast: np.ndarray = field(default_factory=lambda: DEFAULT_CONTRAST.copy())
    shadow_attenuation: float = 0.15
    pixel_pitch_um: float = 4.2
    seed: int = 0

    @classmethod
    def for_grid(cls, r_samples: int, a_lines: int, **kwargs) -> "PhantomConfig":
        """Config with the default geometry ranges rescaled from the 64-pixel
        radial reference to the requested grid."""
        scale = r_samples / 64.0
        defaults = dict(
            lumen_radius_range=(14.0 * scale, 22.0 * scale),
            intima_thickness_range=(max(1.0, 4.0 * scale), max(2.0, 9.0 * scale)),
            media_thickness_range=(max(1.0, 4.0 * scale), max(2.0, 9.0 * scale)),
            wedge_width_range=(max(3, round(7 * a_lines / 128)),
                               max(4, round(14 * a_lines / 128))),
        )
        defaults.update(kwargs)
        return cls(r_samples=r_samples, a_lines=a_lines, **defaults)

    def __post_init__(self):
        self.channel_contrast = np.asarray(self.channel_contrast, dtype=np.float64)
        if self.channel_contrast.shape != (NUM_CLASSES, 3):
            raise ValueError("channel_contrast must have shape (6, 3)")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        for name in ("lumen_radius_range", "intima_thickness_range",
                     "media_thickness_range", "wedge_count_range", "wedge_width_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {(lo, hi)}")
        if self.wedge_width_range[1] >= self.a_lines // 2:
            raise ValueError("wedge_width_range too wide for the angular grid")


def effective_class_means(config: PhantomConfig) -> np.ndarray:
    """Noise-free per-class channel means as they appear in generated images
    (shadow classes carry the intensity attenuation)."""
    means = config.channel_contrast.copy()
    means[GSHADOW - 1, 0] *= config.shadow_attenuation
    means[PSHADOW - 1, 0] *= config.shadow_attenuation
    return means


def _harmonic_wiggle(rng: np.random.Generator, a_lines: int,
                     max_amp: float = 0.06) -> np.ndarray:
    """Sum of up to 3 random low-order circular harmonics, values in (-3a, 3a)."""
    theta = 2.0 * np.pi * np.arange(a_lines) / a_lines
    wiggle = np.zeros(a_lines)
    n_harm = int(rng.integers(1, 4))
    for _ in range(n_harm):
        k = int(rng.integers(1, 4))
        amp = rng.uniform(0.0, max_amp)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wiggle += amp * np.cos(k * theta + phase)
    return wiggle


def _sample_wedges(rng: np.random.Generator, config: PhantomConfig) -> list[tuple[str, int, int]]:
    lo, hi = config.wedge_count_range
    count = int(rng.integers(lo, hi + 1))
    wedges: list[tuple[str, int, int]] = []
    taken: list[tuple[int, int]] = []
    a = config.a_lines
    for i in range(count):
        kind = "guidewire" if i == 0 else "plaque"
        for _ in range(50):
            width = int(rng.integers(config.wedge_width_range[0],
                                     config.wedge_width_range[1] + 1))
            start = int(rng.integers(0, a))
            cols = set(((start + np.arange(width)) % a).tolist())
            # keep wedges >= 8 A-lines apart so the wall arc between two
            # wedges never falls below the post-processing size filter
            margin = set(((start + np.arange(-8, width + 8)) % a).tolist())
            if all(not margin & set(wedge_columns(s, e, a).tolist())
                   for s, e in taken):
                wedges.append((kind, start, (start + width) % a))
                taken.append((start, (start + width) % a))
                break
    return wedges


def generate(config: PhantomConfig) -> tuple[PolarImage, LabelMap, AnnotationSet]:
    """Generate one phantom cross-section; deterministic given config.seed."""
    rng = np.random.default_rng(config.seed)
    r_samples, a_lines = config.r_samples, config.a_lines

    base_lumen = rng.uniform(*config.lumen_radius_range)
    base_intima = rng.uniform(*config.intima_thickness_range)
    base_media = rng.uniform(*config.media_thickness_range)
    if base_lumen + base_intima + base_media > r_samples - 2:
        raise InfeasibleGeometry(
            f"lumen+intima+media = {base_lumen + base_intima + base_media:.1f} "
            f"does not fit in R={r_samples}")

    lumen = base_lumen * (1.0 + _harmonic_wiggle(rng, a_lines))
    iel = lumen + base_intima * (1.0 + _harmonic_wiggle(rng, a_lines))
    eel = iel + base_media * (1.0 + _harmonic_wiggle(rng, a_lines))
    eel = np.minimum(eel, r_samples - 2)
    iel = np.minimum(iel, eel)
    lumen = np.clip(lumen, 1.0, iel)

    wedges = _sample_wedges(rng, config)
    ann = AnnotationSet(lumen, iel, eel, wedges)
    labels = contours_to_labels(ann, (r_samples, a_lines))

    means = effective_class_means(config)
    per_pixel = means[labels.classes.astype(np.int64) - 1]  # (R, A, 3)
    channels = per_pixel.transpose(2, 0, 1).copy()
    if config.noise_level > 0:
        speckle = rng.exponential(1.0, size=(r_samples, a_lines)) - 1.0
        channels[0] *= 1.0 + 0.35 * config.noise_level * speckle
        channels[1] += rng.normal(0.0, 0.08 * config.noise_level, size=(r_samples, a_lines))
        channels[2] += rng.normal(0.0, 0.08 * config.noise_level, size=(r_samples, a_lines))
    channels[0] = np.clip(channels[0], 0.0, None)
    channels[2] = np.clip(channels[2], 0.0, 1.0)
    image = PolarImage(channels.astype(np.float32), pixel_pitch_um=config.pixel_pitch_um)
    return image, labels, ann


def perturb_labels(labels: LabelMap, severity: float, seed: int,
                   jitter_px: float = 5.0, wedge_jitter: float = 3.0) -> LabelMap:
    """Degrade a label map by per-A-line contour jitter and wedge-edge jitter.

    severity in [0, 1] scales the jitter amplitude; 0 is the identity. Output
    is always a valid, topology-correct label map (jitter is clamped to keep
    contour ordering).
    """
    if not 0.0 <= severity <= 1.0:
        raise ValueError("severity must lie in [0, 1]")
    r_samples, a_lines = labels.shape
    ann = labels_to_annotation(labels)
    if severity == 0.0:
        return LabelMap(labels.classes.copy())
    rng = np.random.default_rng(seed)
    amp = severity * jitter_px
    lum = ann.lumen_contour + rng.uniform(-amp, amp, a_lines)
    iel = ann.iel_contour + rng.uniform(-amp, amp, a_lines)
    eel = ann.eel_contour + rng.uniform(-amp, amp, a_lines)
    lum = np.clip(lum, 1.0, r_samples - 2)
    iel = np.clip(iel, lum, r_samples - 2)
    eel = np.clip(eel, iel, r_samples - 1)

    w_amp = severity * wedge_jitter
    new_wedges: list[tuple[str, int, int]] = []
    placed: list[set[int]] = []
    for kind, a0, a1 in ann.shadow_wedges:
        width = len(wedge_columns(a0, a1, a_lines))
        shift = int(np.rint(rng.uniform(-w_amp, w_amp)))
        grow = int(np.rint(rng.uniform(-w_amp, w_amp)))
        new_start = (a0 + shift) % a_lines
        new_width = int(np.clip(width + grow, 1, a_lines - 1))
        cols = set(((new_start + np.arange(new_width)) % a_lines).tolist())
        pad = {(new_start - 1) % a_lines, (new_start + new_width) % a_lines}
        if any((cols | pad) & prev for prev in placed):
            new_start, new_width = a0, width  # revert on collision
            cols = set(((new_start + np.arange(new_width)) % a_lines).tolist())
        new_wedges.append((kind, new_start, (new_start + new_width) % a_lines))
        placed.append(cols)
    return contours_to_labels(AnnotationSet(lum, iel, eel, new_wedges),
                              (r_samples, a_lines))


def generate_dataset(out_dir: str | Path, count: int, seed: int = 0,
                     r_samples: int = 64, a_lines: int = 128,
                     noise_level: float = 1.0, frames_per_patient: int = 4,
                     config: PhantomConfig | None = None) -> list[tuple[str, str]]:
    """Write ``count`` phantom records plus a manifest to ``out_dir``.

    Consecutive records are grouped into synthetic patients of
    ``frames_per_patient`` frames so patient-level splits are meaningful.
    Returns the manifest entries.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(seed)
    entries = []
    for i in range(count):
        cfg_kwargs = dict(noise_level=noise_level,
                          seed=int(master.integers(0, 2**63 - 1)))
        if config is not None:
            cfg_kwargs.update({k: getattr(config, k) for k in (
                "lumen_radius_range", "intima_thickness_range", "media_thickness_range",
                "wedge_count_range", "wedge_width_range", "channel_contrast",
                "shadow_attenuation", "pixel_pitch_um")})
        image, labels, _ = generate(PhantomConfig.for_grid(r_samples, a_lines, **cfg_kwargs))
        patient_id = f"P{i // frames_per_patient:04d}"
        name = f"rec_{i:05d}.psoct"
        save_record(out_dir / name, image, labels, patient_id=patient_id)
        entries.append((name, patient_id))
    write_manifest(out_dir, entries)
    return entries
