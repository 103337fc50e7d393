"""Prediction cleanup and vessel-topology rules.

A label map is topology-valid when:
  1. lumen is a single connected object without any 2D void,
  2. the guidewire shadow (if present) is a single connected object without
     voids,
  3. outside is a single connected object without voids,
  4. shadows are confined between the lumen, the outside, and two A-lines,
  5. along every A-line the layers are ordered lumen, intima, media, outside
     (shadow wedges replace intima+media).

Connectivity is 4-neighbor with circular wrap along the angular axis.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .datamodel import (
    GSHADOW,
    INTIMA,
    LUMEN,
    MEDIA,
    NUM_CLASSES,
    OUTSIDE,
    PSHADOW,
    BoundarySet,
    LabelMap,
    ProbMap,
)
from .errors import MissingInterface

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

# admissible per-A-line run patterns (radially outward)
_PATTERNS = (
    (LUMEN, INTIMA, MEDIA, OUTSIDE),
    (LUMEN, GSHADOW, OUTSIDE),
    (LUMEN, PSHADOW, OUTSIDE),
)


@dataclass
class TopologyReport:
    lumen_single_component: bool
    gshadow_single_component: bool
    outside_single_component: bool
    shadows_confined: bool
    layer_order_valid: bool
    violations: dict[str, list[int]] = field(default_factory=dict)

    @property
    def all_valid(self) -> bool:
        return (self.lumen_single_component and self.gshadow_single_component
                and self.outside_single_component and self.shadows_confined
                and self.layer_order_valid)

    def as_dict(self) -> dict:
        return {
            "lumen_single_component": self.lumen_single_component,
            "gshadow_single_component": self.gshadow_single_component,
            "outside_single_component": self.outside_single_component,
            "shadows_confined": self.shadows_confined,
            "layer_order_valid": self.layer_order_valid,
            "all_valid": self.all_valid,
            "violations": {k: list(map(int, v)) for k, v in self.violations.items()},
        }


def wrapped_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected component labeling with circular wrap along axis 1."""
    labels, count = ndimage.label(mask, structure=_FOUR_CONN)
    if count == 0 or mask.shape[1] < 2:
        return labels, count
    left, right = labels[:, 0], labels[:, -1]
    seam = (left > 0) & (right > 0) & (left != right)
    if not seam.any():
        return labels, count
    parent = np.arange(count + 1)

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for lo, hi in zip(left[seam], right[seam]):
        ra, rb = find(int(lo)), find(int(hi))
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(count + 1)])
    _, renum = np.unique(roots[1:], return_inverse=True)
    out = np.zeros_like(labels)
    nz = labels > 0
    out[nz] = renum[labels[nz] - 1] + 1
    return out, int(renum.max()) + 1


def _column_runs(column: np.ndarray) -> list[tuple[int, int, int]]:
    """Maximal constant runs of one A-line as (class, start, stop)."""
    change = np.nonzero(np.diff(column))[0] + 1
    starts = np.concatenate([[0], change])
    stops = np.concatenate([change, [len(column)]])
    return [(int(column[s]), int(s), int(e)) for s, e in zip(starts, stops)]


def _is_subsequence(seq: tuple[int, ...], pattern: tuple[int, ...]) -> bool:
    it = iter(pattern)
    return all(any(c == p for p in it) for c in seq)


def _order_valid(runs: list[tuple[int, int, int]]) -> bool:
    seq = tuple(r[0] for r in runs)
    if seq == (OUTSIDE,):
        return True
    if seq[0] != LUMEN or seq[-1] != OUTSIDE:
        return False
    return any(_is_subsequence(seq, p) for p in _PATTERNS)


def _component_rule(cls: np.ndarray, code: int) -> tuple[bool, list[int]]:
    """Single connected object without 2D voids; vacuously true when absent."""
    mask = cls == code
    if not mask.any():
        return True, []
    labels, count = wrapped_components(mask)
    bad_cols: set[int] = set()
    if count > 1:
        sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, count + 1))
        keep = int(np.argmax(sizes)) + 1
        bad_cols.update(np.nonzero((labels > 0) & (labels != keep))[1].tolist())
    comp_labels, comp_count = wrapped_components(~mask)
    for i in range(1, comp_count + 1):
        region = comp_labels == i
        if not (region[0, :].any() or region[-1, :].any()):
            bad_cols.update(np.nonzero(region)[1].tolist())  # enclosed void
    return len(bad_cols) == 0, sorted(bad_cols)


def _shadow_confinement(cls: np.ndarray) -> tuple[bool, list[int]]:
    r_samples, _ = cls.shape
    bad: set[int] = set()
    for code in (GSHADOW, PSHADOW):
        cols = np.nonzero((cls == code).any(axis=0))[0]
        for a in cols:
            rows = np.nonzero(cls[:, a] == code)[0]
            lo, hi = rows[0], rows[-1]
            if rows.size != hi - lo + 1:
                bad.add(int(a))  # split radial run
                continue
            if lo == 0 or cls[lo - 1, a] != LUMEN:
                bad.add(int(a))
            if hi == r_samples - 1 or cls[hi + 1, a] != OUTSIDE:
                bad.add(int(a))
    return len(bad) == 0, sorted(bad)


def verify_topology(labels: LabelMap | np.ndarray) -> TopologyReport:
    """Evaluate all five topology rules; pure predicate, no mutation."""
    cls = labels.classes if isinstance(labels, LabelMap) else np.asarray(labels)
    lumen_ok, lumen_bad = _component_rule(cls, LUMEN)
    gsh_ok, gsh_bad = _component_rule(cls, GSHADOW)
    out_ok, out_bad = _component_rule(cls, OUTSIDE)
    conf_ok, conf_bad = _shadow_confinement(cls)
    order_bad = [a for a in range(cls.shape[1])
                 if not _order_valid(_column_runs(cls[:, a]))]
    violations = {}
    for name, bad in (("lumen_single_component", lumen_bad),
                      ("gshadow_single_component", gsh_bad),
                      ("outside_single_component", out_bad),
                      ("shadows_confined", conf_bad),
                      ("layer_order_valid", order_bad)):
        if bad:
            violations[name] = bad
    return TopologyReport(lumen_ok, gsh_ok, out_ok, conf_ok, not order_bad, violations)


# ---------------------------------------------------------------------------
# clean(): argmax -> cosmetic repairs -> projection onto valid topology
# ---------------------------------------------------------------------------

_VOTE_OFFSETS = (((-1, 0), 2), ((1, 0), 2), ((0, -1), 2), ((0, 1), 2),
                 ((-1, -1), 1), ((-1, 1), 1), ((1, -1), 1), ((1, 1), 1))


def _vote_winners(cls: np.ndarray) -> np.ndarray:
    """Per-pixel weighted-majority class of the 8 neighbors, excluding the
    pixel's own class; 0 where no neighbor of another class exists."""
    r_samples, a_lines = cls.shape
    counts = np.zeros((NUM_CLASSES + 1, r_samples, a_lines), dtype=np.int32)
    for (dr, da), weight in _VOTE_OFFSETS:
        rolled = np.roll(cls, -da, axis=1)
        nb = np.zeros_like(rolled)
        if dr == -1:
            nb[1:] = rolled[:-1]
        elif dr == 1:
            nb[:-1] = rolled[1:]
        else:
            nb = rolled
        for c in range(1, NUM_CLASSES + 1):
            counts[c] += weight * (nb == c)
    rows, cols = np.meshgrid(np.arange(r_samples), np.arange(a_lines), indexing="ij")
    counts[cls, rows, cols] = 0
    return counts.argmax(axis=0).astype(np.uint8)


def _remove_small_components(cls: np.ndarray, min_px: int, max_rounds: int = 3) -> np.ndarray:
    """Reassign pixels of components smaller than min_px to the weighted
    majority class of their neighbors, iterating until stable."""
    cls = cls.copy()
    for _ in range(max_rounds):
        small = np.zeros(cls.shape, dtype=bool)
        for code in range(1, NUM_CLASSES + 1):
            mask = cls == code
            if not mask.any():
                continue
            labels, count = wrapped_components(mask)
            sizes = np.bincount(labels.ravel(), minlength=count + 1)
            small |= mask & (sizes[labels] < min_px)
        if not small.any():
            break
        winners = _vote_winners(cls)
        apply_mask = small & (winners > 0)
        if not apply_mask.any():
            break
        cls[apply_mask] = winners[apply_mask]
    return cls


def _fill_holes(cls: np.ndarray) -> np.ndarray:
    """Fill complement components enclosed by a single class."""
    cls = cls.copy()
    for code in range(1, NUM_CLASSES + 1):
        if not (cls == code).any():
            continue
        comp_labels, count = wrapped_components(cls != code)
        for i in range(1, count + 1):
            region = comp_labels == i
            if not (region[0, :].any() or region[-1, :].any()):
                cls[region] = code
    return cls


def _pattern_dp(cls: np.ndarray, pattern: tuple[int, ...],
                min_len: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-pixels-changed fit of a fixed class order to every A-line.

    Returns (cost[A], starts[S-1, A]) where starts[s] is the first radial
    index of segment s+1. min_len gives the minimum length per segment.
    """
    r_samples, a_lines = cls.shape
    n_seg = len(pattern)
    big = np.int64(1 << 30)
    # mism[s, r, a]: mismatches of prefix [0, r) against pattern class s
    pref = np.zeros((n_seg, r_samples + 1, a_lines), dtype=np.int64)
    for s, code in enumerate(pattern):
        pref[s, 1:] = np.cumsum(cls != code, axis=0)

    f = np.full((r_samples + 1, a_lines), big)
    f[min_len[0]:] = pref[0, min_len[0]:]
    choice = np.zeros((n_seg, r_samples + 1, a_lines), dtype=np.int32)
    for s in range(1, n_seg):
        g = np.full((r_samples + 1, a_lines), big)
        gc = np.zeros((r_samples + 1, a_lines), dtype=np.int32)
        run_min = np.full(a_lines, big)
        run_arg = np.zeros(a_lines, dtype=np.int32)
        lag = int(min_len[s])
        for r in range(r_samples + 1):
            rp = r - lag
            if rp >= 0:
                cand = f[rp] - pref[s, rp]
                better = cand < run_min
                run_min[better] = cand[better]
                run_arg[better] = rp
            ok = run_min < big
            g[r, ok] = run_min[ok] + pref[s, r, ok]
            gc[r] = run_arg
        f = g
        choice[s] = gc
    cost = f[r_samples]
    starts = np.zeros((n_seg - 1, a_lines), dtype=np.int64)
    r_cur = np.full(a_lines, r_samples, dtype=np.int64)
    for s in range(n_seg - 1, 0, -1):
        r_cur = choice[s][r_cur, np.arange(a_lines)].astype(np.int64)
        starts[s - 1] = r_cur
    return cost, starts


def _circular_median(values: np.ndarray, radius: int) -> np.ndarray:
    if radius < 1 or len(values) < 3:
        return values.copy()
    window = 2 * radius + 1
    padded = np.concatenate([values[-radius:], values, values[:radius]])
    out = np.median(np.lib.stride_tricks.sliding_window_view(padded, window), axis=1)
    return np.rint(out).astype(values.dtype)


def _segment_median(values: np.ndarray, active: np.ndarray, radius: int) -> np.ndarray:
    """Median filter applied independently inside circular runs of ``active``."""
    out = values.copy()
    if radius < 1:
        return out
    a_lines = len(values)
    if active.all():
        return _circular_median(values, radius)
    idx = np.arange(a_lines)
    start = int(np.nonzero(~active)[0][0])
    order = np.roll(idx, -start)
    act = active[order]
    runs = []
    i = 0
    while i < a_lines:
        if act[i]:
            j = i
            while j < a_lines and act[j]:
                j += 1
            runs.append(order[i:j])
            i = j
        else:
            i += 1
    for run in runs:
        vals = values[run]
        if len(vals) <= 2:
            continue
        pad = min(radius, len(vals))
        padded = np.concatenate([np.repeat(vals[0], pad), vals, np.repeat(vals[-1], pad)])
        med = np.median(np.lib.stride_tricks.sliding_window_view(padded, 2 * pad + 1), axis=1)
        out[run] = np.rint(med).astype(values.dtype)
    return out


def default_clean_params(shape: tuple[int, int]) -> tuple[int, int]:
    """min_object_px scales with image area, smooth_radius with its sqrt
    (both anchored at 16 and 3 for the 64x128 grid)."""
    area = shape[0] * shape[1]
    min_px = max(1, round(16 * area / 8192))
    radius = max(1, round(3 * np.sqrt(area / 8192)))
    return min_px, radius


def clean(yhat: ProbMap | np.ndarray, min_object_px: int | None = None,
          smooth_radius: int | None = None) -> LabelMap:
    """Convert a probability map to a topology-valid label map.

    Pipeline: hard argmax; if already valid, return it unchanged. Otherwise
    remove small components and fill holes (returning early once valid),
    then project every A-line onto the nearest admissible layer pattern:
    shadow wedges are detected by pattern cost (guidewire keeps only its
    largest angular run), boundary curves are median-smoothed along the
    angular axis, and wedge intervals are forced to overlap so each shadow
    stays one connected object.
    """
    if isinstance(yhat, ProbMap):
        cls = yhat.argmax_labels().classes.copy()
    elif isinstance(yhat, LabelMap):
        cls = yhat.classes.copy()
    else:
        arr = np.asarray(yhat)
        if arr.ndim == 3:
            cls = (np.argmax(arr, axis=2) + 1).astype(np.uint8)
        else:
            cls = arr.astype(np.uint8).copy()
    r_samples, a_lines = cls.shape
    if min_object_px is None or smooth_radius is None:
        d_px, d_rad = default_clean_params((r_samples, a_lines))
        min_object_px = d_px if min_object_px is None else min_object_px
        smooth_radius = d_rad if smooth_radius is None else smooth_radius

    if not (cls == LUMEN).any():
        warnings.warn("degenerate prediction: no lumen pixels; returning all-outside map")
        return LabelMap(np.full((r_samples, a_lines), OUTSIDE, dtype=np.uint8))
    if verify_topology(cls).all_valid:
        return LabelMap(cls)

    cls = _remove_small_components(cls, min_object_px)
    cls = _fill_holes(cls)
    if verify_topology(cls).all_valid:
        return LabelMap(cls)

    # project each A-line onto the closest admissible pattern
    cost_limo, starts_limo = _pattern_dp(cls, _PATTERNS[0], np.array([1, 0, 0, 1]))
    cost_lgo, starts_lgo = _pattern_dp(cls, _PATTERNS[1], np.array([1, 1, 1]))
    cost_lpo, starts_lpo = _pattern_dp(cls, _PATTERNS[2], np.array([1, 1, 1]))

    wants_g = (cost_lgo < cost_limo) & (cost_lgo < cost_lpo)
    wants_p = (cost_lpo < cost_limo) & (cost_lpo <= cost_lgo) & ~wants_g
    g_wedge = np.zeros(a_lines, dtype=bool)
    if wants_g.any():
        labels1d, count = wrapped_components(wants_g[None, :])
        if count:
            sizes = [int((labels1d[0] == i).sum()) for i in range(1, count + 1)]
            g_wedge = labels1d[0] == (int(np.argmax(sizes)) + 1)
    p_wedge = wants_p & ~g_wedge
    plain = ~(g_wedge | p_wedge)

    r1 = np.where(plain, starts_limo[0], 0)
    r2 = np.where(plain, starts_limo[1], 0)
    r3 = np.where(plain, starts_limo[2], 0)
    r1[g_wedge] = starts_lgo[0][g_wedge]
    r3[g_wedge] = starts_lgo[1][g_wedge]
    r1[p_wedge] = starts_lpo[0][p_wedge]
    r3[p_wedge] = starts_lpo[1][p_wedge]

    r1 = _circular_median(r1, smooth_radius)
    r3 = _circular_median(r3, smooth_radius)
    r2 = _segment_median(r2, plain, smooth_radius)

    wedge = ~plain
    r1 = np.clip(r1, 1, r_samples - 1)
    r1[wedge] = np.clip(r1[wedge], 1, r_samples - 2)
    r3 = np.clip(r3, r1 + wedge.astype(np.int64), r_samples - 1)
    r2 = np.clip(r2, r1, r3)

    # force adjacent wedge intervals [r1, r3) to overlap
    for wedge_mask in (g_wedge, p_wedge):
        if not wedge_mask.any():
            continue
        labels1d, count = wrapped_components(wedge_mask[None, :])
        for i in range(1, count + 1):
            cols = np.nonzero(labels1d[0] == i)[0]
            if cols.size == a_lines:
                pairs = list(zip(np.arange(a_lines), np.roll(np.arange(a_lines), -1)))
            else:
                # order the circular run from its start column
                start = cols[~np.isin((cols - 1) % a_lines, cols)][0]
                run = (start + np.arange(cols.size)) % a_lines
                pairs = list(zip(run[:-1], run[1:]))
            for _ in range(8):
                changed = False
                for a_prev, a_cur in pairs:
                    lo = min(r1[a_cur], r3[a_prev] - 1)
                    hi = max(r3[a_cur], r1[a_prev] + 1)
                    if lo != r1[a_cur] or hi != r3[a_cur]:
                        r1[a_cur], r3[a_cur] = lo, hi
                        changed = True
                if not changed:
                    break
            else:
                r1[cols] = r1[cols].min()
                r3[cols] = r3[cols].max()

    rr = np.arange(r_samples)[:, None]
    out = np.full((r_samples, a_lines), OUTSIDE, dtype=np.uint8)
    out[rr < r3[None, :]] = MEDIA
    out[rr < r2[None, :]] = INTIMA
    out[(rr >= r1[None, :]) & (rr < r3[None, :]) & g_wedge[None, :]] = GSHADOW
    out[(rr >= r1[None, :]) & (rr < r3[None, :]) & p_wedge[None, :]] = PSHADOW
    out[rr < r1[None, :]] = LUMEN
    return LabelMap(out)


# ---------------------------------------------------------------------------
# Boundary extraction
# ---------------------------------------------------------------------------

INTERFACES = ("outer_lumen", "iel", "eel")
_INTERFACE_CLASS = {"outer_lumen": LUMEN, "iel": INTIMA, "eel": MEDIA}


def extract_boundaries(labels: LabelMap | np.ndarray, pixel_pitch_um: float = 1.0,
                       require_all: bool = True) -> dict[str, BoundarySet]:
    """Per-interface boundary pixel sets.

    A boundary pixel for an interface is the first pixel after the inner
    class along the A-line: outer_lumen = lumen->anything, iel =
    intima->anything, eel = media->anything. With require_all, raises
    MissingInterface when an interface is absent on every A-line; otherwise
    absent interfaces are omitted from the result.
    """
    cls = labels.classes if isinstance(labels, LabelMap) else np.asarray(labels)
    out: dict[str, BoundarySet] = {}
    missing = []
    for name in INTERFACES:
        inner = _INTERFACE_CLASS[name]
        trans = (cls[:-1, :] == inner) & (cls[1:, :] != inner)
        rows, cols = np.nonzero(trans)
        if rows.size == 0:
            missing.append(name)
            continue
        pts = np.stack([rows + 1, cols], axis=1)
        out[name] = BoundarySet(points=pts, pixel_pitch_um=pixel_pitch_um)
    if missing and require_all:
        raise MissingInterface(f"interfaces absent from label map: {missing}")
    return out
