"""Evaluation metrics: multi-class accuracy, Dice, sensitivity/specificity,
and the boundary distance errors (ADE, MHD)."""

from __future__ import annotations

import numpy as np

from .datamodel import CLASS_NAMES, NUM_CLASSES, BoundarySet, LabelMap
from .errors import EmptyBoundary
from .postprocess import INTERFACES, extract_boundaries


def _classes(y) -> np.ndarray:
    return y.classes if isinstance(y, LabelMap) else np.asarray(y)


def accuracy(y, yhat_labels) -> float:
    """Mean over the 6 classes of (N - |symmetric difference|) / N."""
    yc, pc = _classes(y), _classes(yhat_labels)
    n = yc.size
    total = 0.0
    for c in range(1, NUM_CLASSES + 1):
        sym_diff = np.count_nonzero((yc == c) != (pc == c))
        total += (n - sym_diff) / n
    return total / NUM_CLASSES


def dice_coef(y, yhat_labels) -> tuple[float, np.ndarray]:
    """Per-class Dice 2|Y_c n P_c| / (|Y_c| + |P_c|) and their mean.

    Classes absent from both maps are NaN and excluded from the mean (they
    would otherwise inflate aggregates on wedge-free frames).
    """
    yc, pc = _classes(y), _classes(yhat_labels)
    per_class = np.full(NUM_CLASSES, np.nan)
    for c in range(1, NUM_CLASSES + 1):
        gt, pred = yc == c, pc == c
        denom = gt.sum() + pred.sum()
        if denom == 0:
            continue
        per_class[c - 1] = 2.0 * np.count_nonzero(gt & pred) / denom
    mean = float(np.nanmean(per_class)) if not np.all(np.isnan(per_class)) else np.nan
    return mean, per_class


def sensitivity_specificity(y, yhat_labels, class_code: int) -> tuple[float, float]:
    """One-vs-rest TP/(TP+FN) and TN/(TN+FP); NaN when undefined (empty
    class or empty complement), excluded from aggregates by the caller."""
    yc, pc = _classes(y), _classes(yhat_labels)
    gt, pred = yc == class_code, pc == class_code
    tp = np.count_nonzero(gt & pred)
    fn = np.count_nonzero(gt & ~pred)
    tn = np.count_nonzero(~gt & ~pred)
    fp = np.count_nonzero(~gt & pred)
    sens = tp / (tp + fn) if (tp + fn) > 0 else np.nan
    spec = tn / (tn + fp) if (tn + fp) > 0 else np.nan
    return sens, spec


def _points(b) -> np.ndarray:
    pts = b.points if isinstance(b, BoundarySet) else np.asarray(b).reshape(-1, 2)
    return pts.astype(np.float64)


def _directed_euclidean(a: np.ndarray, b: np.ndarray) -> float:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1)).mean())


def ade(pred_boundary, gt_boundary, mode: str = "radial") -> float:
    """Average distance error from predicted to ground-truth boundary pixels.

    mode="radial": on A-lines where both boundaries have a pixel, uses the
    minimum radial offset; elsewhere falls back to 2D nearest-neighbor.
    mode="euclidean": plain 2D nearest-neighbor everywhere (the directed
    term of the MHD). Distances are in pixels.
    """
    pred, gt = _points(pred_boundary), _points(gt_boundary)
    if len(pred) == 0 or len(gt) == 0:
        raise EmptyBoundary("both boundary sets must be nonempty")
    if mode == "euclidean":
        return _directed_euclidean(pred, gt)
    if mode != "radial":
        raise ValueError(f"unknown ade mode {mode!r}")
    dists = np.empty(len(pred))
    gt_cols = gt[:, 1]
    for i, (r, a) in enumerate(pred):
        same = gt_cols == a
        if same.any():
            dists[i] = np.abs(gt[same, 0] - r).min()
        else:
            dists[i] = np.sqrt(((gt - [r, a]) ** 2).sum(axis=1).min())
    return float(dists.mean())


def mhd(pred_boundary, gt_boundary) -> float:
    """Modified Hausdorff distance: max of the two directed 2D ADEs."""
    pred, gt = _points(pred_boundary), _points(gt_boundary)
    if len(pred) == 0 or len(gt) == 0:
        raise EmptyBoundary("both boundary sets must be nonempty")
    return max(_directed_euclidean(pred, gt), _directed_euclidean(gt, pred))


def _filter_columns(bset: BoundarySet, keep: np.ndarray) -> BoundarySet:
    mask = keep[bset.points[:, 1]]
    return BoundarySet(bset.points[mask], bset.pixel_pitch_um)


def frame_metrics(y: LabelMap, pred: LabelMap, pixel_pitch_um: float = 1.0,
                  exclude_alines: np.ndarray | None = None) -> dict:
    """All per-frame metrics as a flat dict.

    Boundary metrics are computed per interface in both the radial and 2D
    readings; when an exclusion mask over A-lines is given, excluded-column
    variants are reported alongside the full ones.
    """
    mean_dice, per_class_dice = dice_coef(y, pred)
    out: dict = {
        "accuracy": accuracy(y, pred),
        "dice_mean": mean_dice,
        "n_pixels": int(_classes(y).size),
    }
    for c in range(1, NUM_CLASSES + 1):
        name = CLASS_NAMES[c]
        sens, spec = sensitivity_specificity(y, pred, c)
        gt, pr = _classes(y) == c, _classes(pred) == c
        out[f"dice_{name}"] = per_class_dice[c - 1]
        out[f"sensitivity_{name}"] = sens
        out[f"specificity_{name}"] = spec
        out[f"accuracy_{name}"] = float(np.count_nonzero(gt == pr) / gt.size)

    gt_bounds = extract_boundaries(y, pixel_pitch_um, require_all=False)
    pred_bounds = extract_boundaries(pred, pixel_pitch_um, require_all=False)
    variants = [("", None)]
    if exclude_alines is not None:
        variants.append(("_excl", ~np.asarray(exclude_alines, dtype=bool)))
    mhd_values = []
    for iface in INTERFACES:
        for suffix, keep in variants:
            if iface not in gt_bounds or iface not in pred_bounds:
                out[f"ade_{iface}{suffix}_px"] = np.nan
                out[f"mhd_{iface}{suffix}_px"] = np.nan
                continue
            g, p = gt_bounds[iface], pred_bounds[iface]
            if keep is not None:
                g, p = _filter_columns(g, keep), _filter_columns(p, keep)
            if len(g) == 0 or len(p) == 0:
                out[f"ade_{iface}{suffix}_px"] = np.nan
                out[f"mhd_{iface}{suffix}_px"] = np.nan
                continue
            ade_px = ade(p, g, mode="radial")
            out[f"ade_{iface}{suffix}_px"] = ade_px
            out[f"ade_{iface}{suffix}_um"] = ade_px * pixel_pitch_um
            out[f"ade_rev_{iface}{suffix}_px"] = ade(g, p, mode="radial")
            out[f"ade2d_{iface}{suffix}_px"] = ade(p, g, mode="euclidean")
            mhd_px = mhd(p, g)
            out[f"mhd_{iface}{suffix}_px"] = mhd_px
            out[f"mhd_{iface}{suffix}_um"] = mhd_px * pixel_pitch_um
            if suffix == "":
                mhd_values.append(mhd_px)
    out["mhd_px"] = float(np.mean(mhd_values)) if mhd_values else np.nan
    out["mhd_um"] = out["mhd_px"] * pixel_pitch_um
    return out


def aggregate_frames(frames: list[dict]) -> dict:
    """Mean of every numeric field over frames, NaN-aware; counts appended."""
    if not frames:
        return {"n_frames": 0}
    keys = sorted({k for f in frames for k in f})
    agg: dict = {"n_frames": len(frames)}
    for k in keys:
        vals = np.array([f[k] for f in frames if k in f], dtype=np.float64)
        if np.all(np.isnan(vals)):
            agg[k] = np.nan
        else:
            agg[k] = float(np.nanmean(vals))
    return agg
