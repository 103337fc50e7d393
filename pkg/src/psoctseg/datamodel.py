"""Core image/label types, the on-disk record format, and contour rasterization.

The polar grid has shape (R, A): R radial samples per A-line, A A-lines per
cross-section. The angular axis is circular everywhere (index A wraps to 0).
Class codes follow a fixed 1-6 encoding:

    1 Outside, 2 Lumen, 3 Intima, 4 Media, 5 G-Shadow, 6 P-Shadow
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContourOrderViolation, FormatError, OutOfBounds, ShapeMismatch

OUTSIDE, LUMEN, INTIMA, MEDIA, GSHADOW, PSHADOW = 1, 2, 3, 4, 5, 6
NUM_CLASSES = 6
CLASS_NAMES = {
    OUTSIDE: "outside",
    LUMEN: "lumen",
    INTIMA: "intima",
    MEDIA: "media",
    GSHADOW: "g-shadow",
    PSHADOW: "p-shadow",
}
SHADOW_CLASSES = (GSHADOW, PSHADOW)
WEDGE_KINDS = {"guidewire": GSHADOW, "plaque": PSHADOW}

RECORD_MAGIC = b"PSOCTSEG"
RECORD_VERSION = 1
MANIFEST_NAME = "manifest.txt"


@dataclass
class PolarImage:
    """Three-channel polar image: intensity, birefringence, depolarization.

    ``channels`` has shape (3, R, A), float32. ``pixel_pitch_um`` is the
    radial pixel size in micrometers.
    """

    channels: np.ndarray
    pixel_pitch_um: float = 4.2

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        if self.channels.ndim != 3 or self.channels.shape[0] != 3:
            raise ShapeMismatch(f"expected (3, R, A) channels, got {self.channels.shape}")
        r, a = self.shape
        if r < 8 or a < 8:
            raise ShapeMismatch(f"grid too small: R={r}, A={a} (minimum 8x8)")
        if not np.all(np.isfinite(self.channels)):
            raise ValueError("image contains non-finite values")
        depol = self.channels[2]
        if depol.min() < 0.0 or depol.max() > 1.0:
            raise ValueError("depolarization channel outside [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[1], self.channels.shape[2]


@dataclass
class LabelMap:
    """Per-pixel exclusive class codes, shape (R, A), values in 1..6."""

    classes: np.ndarray

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.uint8)
        if self.classes.ndim != 2:
            raise ShapeMismatch(f"expected (R, A) labels, got {self.classes.shape}")
        lo, hi = int(self.classes.min()), int(self.classes.max())
        if lo < 1 or hi > NUM_CLASSES:
            raise ValueError(f"class codes outside 1..{NUM_CLASSES}: [{lo}, {hi}]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape

    def one_hot(self) -> np.ndarray:
        """Binary view of shape (R, A, 6); rows sum to exactly 1."""
        r, a = self.classes.shape
        out = np.zeros((r, a, NUM_CLASSES), dtype=np.float32)
        rr, aa = np.meshgrid(np.arange(r), np.arange(a), indexing="ij")
        out[rr, aa, self.classes - 1] = 1.0
        return out


@dataclass
class ProbMap:
    """Per-pixel categorical distribution over the 6 classes, shape (R, A, 6)."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float32)
        if self.probs.ndim != 3 or self.probs.shape[2] != NUM_CLASSES:
            raise ShapeMismatch(f"expected (R, A, {NUM_CLASSES}) probs, got {self.probs.shape}")
        if self.probs.min() < 0.0:
            raise ValueError("negative probability")
        sums = self.probs.sum(axis=2)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise ValueError("pixel probabilities do not sum to 1 within 1e-5")

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape[0], self.probs.shape[1]

    def argmax_labels(self) -> LabelMap:
        return LabelMap(np.argmax(self.probs, axis=2).astype(np.uint8) + 1)


@dataclass
class BoundarySet:
    """Inter-class boundary pixel coordinates for one interface.

    ``points`` has shape (N, 2): integer (radial, angular) pixel
    coordinates. ``pixel_pitch_um`` converts radial pixels to micrometers.
    """

    points: np.ndarray
    pixel_pitch_um: float = 1.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.int64).reshape(-1, 2)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def radial(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def angular(self) -> np.ndarray:
        return self.points[:, 1]


@dataclass
class AnnotationSet:
    """Boundary-contour annotation: three per-A-line radial contours plus
    angular shadow wedges.

    Contours are real-valued radial indices (length A). Wedges are
    ``(kind, a_start, a_end)`` with kind in {"guidewire", "plaque"} and a
    half-open circular angular range [a_start, a_end); a_start > a_end wraps
    through 0.
    """

    lumen_contour: np.ndarray
    iel_contour: np.ndarray
    eel_contour: np.ndarray
    shadow_wedges: list[tuple[str, int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.lumen_contour = np.asarray(self.lumen_contour, dtype=np.float64)
        self.iel_contour = np.asarray(self.iel_contour, dtype=np.float64)
        self.eel_contour = np.asarray(self.eel_contour, dtype=np.float64)

    @property
    def n_alines(self) -> int:
        return len(self.lumen_contour)

    def validate(self, r_samples: int | None = None) -> None:
        a = self.n_alines
        if len(self.iel_contour) != a or len(self.eel_contour) != a:
            raise ShapeMismatch("contour lengths disagree")
        bad = np.nonzero((self.lumen_contour > self.iel_contour)
                         | (self.iel_contour > self.eel_contour))[0]
        if bad.size:
            raise ContourOrderViolation(f"contour order violated on A-lines {bad[:8].tolist()}")
        for kind, a0, a1 in self.shadow_wedges:
            if kind not in WEDGE_KINDS:
                raise ValueError(f"unknown wedge kind {kind!r}")
            if not (0 <= a0 < a and 0 <= a1 < a):
                raise OutOfBounds(f"wedge range ({a0}, {a1}) outside [0, {a})")
        if r_samples is not None and float(self.eel_contour.max()) > r_samples:
            raise OutOfBounds(f"EEL contour exceeds R={r_samples}")


def rasterize_contour(contour: np.ndarray) -> np.ndarray:
    """Round a real-valued contour half-up to integer radial indices."""
    return np.floor(np.asarray(contour, dtype=np.float64) + 0.5).astype(np.int64)


def wedge_columns(a_start: int, a_end: int, n_alines: int) -> np.ndarray:
    """A-line indices of the circular half-open range [a_start, a_end).

    ``a_start == a_end`` denotes the full circle (empty wedges are never
    stored).
    """
    if a_start == a_end:
        return np.arange(n_alines)
    if a_start < a_end:
        return np.arange(a_start, a_end)
    return np.concatenate([np.arange(a_start, n_alines), np.arange(0, a_end)])


def contours_to_labels(ann: AnnotationSet, shape: tuple[int, int]) -> LabelMap:
    """Rasterize contour annotations into an exclusive label map.

    Along each A-line the radial order is Lumen (r < lumen), Intima
    (lumen <= r < IEL), Media (IEL <= r < EEL), Outside (r >= EEL). Inside a
    shadow wedge, every pixel between the lumen and the EEL takes the wedge's
    shadow class instead.
    """
    r_samples, a_lines = shape
    if ann.n_alines != a_lines:
        raise ShapeMismatch(f"annotation has {ann.n_alines} A-lines, grid has {a_lines}")
    ann.validate(r_samples)
    lum = rasterize_contour(ann.lumen_contour)
    iel = rasterize_contour(ann.iel_contour)
    eel = rasterize_contour(ann.eel_contour)
    if int(eel.max()) > r_samples:
        raise OutOfBounds(f"rasterized EEL exceeds R={r_samples}")

    rr = np.arange(r_samples)[:, None]
    classes = np.full((r_samples, a_lines), OUTSIDE, dtype=np.uint8)
    classes[rr < eel[None, :]] = MEDIA
    classes[rr < iel[None, :]] = INTIMA
    classes[rr < lum[None, :]] = LUMEN
    for kind, a0, a1 in ann.shadow_wedges:
        cols = wedge_columns(a0, a1, a_lines)
        band = (rr >= lum[None, cols]) & (rr < eel[None, cols])
        sub = classes[:, cols]
        sub[band] = WEDGE_KINDS[kind]
        classes[:, cols] = sub
    return LabelMap(classes)


def labels_to_annotation(labels: LabelMap) -> AnnotationSet:
    """Re-derive contours and wedges from a topology-valid label map.

    Inverse of :func:`contours_to_labels` for integer contours. On wedge
    A-lines the IEL is not observable; it is set to the lumen contour there.
    """
    cls = labels.classes
    r_samples, a_lines = cls.shape
    not_lumen = cls != LUMEN
    lum = np.where(not_lumen.any(axis=0), not_lumen.argmax(axis=0), r_samples)
    is_out = cls == OUTSIDE
    eel = np.where(is_out.any(axis=0), is_out.argmax(axis=0), r_samples)
    is_media = cls == MEDIA
    iel = np.where(is_media.any(axis=0), is_media.argmax(axis=0), eel)

    wedges: list[tuple[str, int, int]] = []
    for code, kind in ((GSHADOW, "guidewire"), (PSHADOW, "plaque")):
        has = (cls == code).any(axis=0)
        if not has.any():
            continue
        iel[has] = lum[has]
        if has.all():
            wedges.append((kind, 0, 0))  # full circle
            continue
        # circular runs of consecutive wedge A-lines
        starts = np.nonzero(has & ~np.roll(has, 1))[0]
        for a0 in starts:
            a1 = a0
            while has[a1 % a_lines]:
                a1 += 1
            wedges.append((kind, int(a0), int(a1 % a_lines)))
    return AnnotationSet(lum.astype(np.float64), iel.astype(np.float64),
                         eel.astype(np.float64), wedges)


# ---------------------------------------------------------------------------
# On-disk record format
# ---------------------------------------------------------------------------

def save_record(path: str | Path, image: PolarImage, labels: LabelMap | None,
                patient_id: str = "unknown") -> None:
    """Write one cross-section record.

    Layout: 8-byte magic, 1-byte version, 4-byte little-endian JSON header
    length, UTF-8 JSON header, image payload as 3*R*A little-endian float32
    in channel-major, radial-major order, then (if labeled) R*A uint8 class
    codes.
    """
    r, a = image.shape
    if labels is not None and labels.shape != (r, a):
        raise ShapeMismatch(f"labels {labels.shape} do not match image {(r, a)}")
    header = {
        "R": r,
        "A": a,
        "pixel_pitch_um": float(image.pixel_pitch_um),
        "patient_id": patient_id,
        "has_labels": labels is not None,
    }
    blob = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(RECORD_MAGIC)
        fh.write(struct.pack("<B", RECORD_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(image.channels, dtype="<f4").tobytes())
        if labels is not None:
            fh.write(np.ascontiguousarray(labels.classes, dtype=np.uint8).tobytes())


def load_record(path: str | Path) -> tuple[PolarImage, LabelMap | None, str]:
    """Read a record written by :func:`save_record`.

    Returns (image, labels-or-None, patient_id).
    """
    raw = Path(path).read_bytes()
    if len(raw) < 13 or raw[:8] != RECORD_MAGIC:
        raise FormatError(f"{path}: bad magic")
    if raw[8] != RECORD_VERSION:
        raise FormatError(f"{path}: unsupported version {raw[8]}")
    (hlen,) = struct.unpack("<I", raw[9:13])
    if len(raw) < 13 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[13:13 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: invalid JSON header: {exc}") from exc
    for key in ("R", "A", "pixel_pitch_um", "patient_id", "has_labels"):
        if key not in header:
            raise FormatError(f"{path}: header missing key {key!r}")
    if header.get("channels", 3) != 3:
        raise FormatError(f"{path}: {header['channels']} channels declared, 3 required")

    r, a = int(header["R"]), int(header["A"])
    off = 13 + hlen
    n_img = 3 * r * a * 4
    if len(raw) < off + n_img:
        raise ShapeMismatch(f"{path}: image payload truncated")
    channels = np.frombuffer(raw[off:off + n_img], dtype="<f4").reshape(3, r, a).copy()
    image = PolarImage(channels, pixel_pitch_um=float(header["pixel_pitch_um"]))
    off += n_img
    labels = None
    if header["has_labels"]:
        if len(raw) < off + r * a:
            raise ShapeMismatch(f"{path}: label payload truncated")
        labels = LabelMap(np.frombuffer(raw[off:off + r * a], dtype=np.uint8).reshape(r, a).copy())
        off += r * a
    if len(raw) != off:
        raise ShapeMismatch(f"{path}: {len(raw) - off} trailing bytes")
    return image, labels, str(header["patient_id"])


def write_manifest(dataset_dir: str | Path, entries: list[tuple[str, str]]) -> Path:
    """Write the dataset manifest: one "relpath<TAB>patient_id" line per record."""
    path = Path(dataset_dir) / MANIFEST_NAME
    with open(path, "w", encoding="utf-8") as fh:
        for relpath, patient_id in entries:
            fh.write(f"{relpath}\t{patient_id}\n")
    return path


def read_manifest(dataset_dir: str | Path) -> list[tuple[str, str]]:
    path = Path(dataset_dir)
    if path.is_dir():
        path = path / MANIFEST_NAME
    entries = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        relpath, _, patient_id = line.partition("\t")
        if not patient_id:
            raise FormatError(f"{path}: malformed manifest line {line!r}")
        entries.append((relpath, patient_id))
    return entries
