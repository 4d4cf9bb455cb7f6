"""Detection evaluation: rotated IoU, AP at 40 recall positions, reports.

The polygon-clipping core is written over generic scalars so the same code
serves two callers: plain floats for evaluation, and autodiff scalars when
the training loss needs a differentiable BEV overlap.  Predicates always
read through ``_scalar`` so branching never touches the tape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import Box3D, CLASS_NAMES


def _scalar(x) -> float:
    if isinstance(x, ad.Tensor):
        return float(x.data)
    return float(x)


# ---------------------------------------------------------------------------
# convex polygon clipping (Sutherland-Hodgman)
# ---------------------------------------------------------------------------

def poly_area(poly) -> object:
    """Shoelace area of a polygon given as [(x, z), ...]; 0 for < 3 vertices."""
    if len(poly) < 3:
        return 0.0
    s = 0.0
    n = len(poly)
    for i in range(n):
        x1, z1 = poly[i]
        x2, z2 = poly[(i + 1) % n]
        s = s + (x1 * z2 - x2 * z1)
    half = s * 0.5
    return half if _scalar(half) >= 0 else -half


def _edge_intersect(P, Q, A, E):
    """Point on segment P->Q crossing the line through A with direction E."""
    px, pz = P
    qx, qz = Q
    ax, az = A
    ex, ez = E
    num = ex * (pz - az) - ez * (px - ax)
    den = ex * (pz - qz) - ez * (px - qx)
    t = num / den
    return (px + t * (qx - px), pz + t * (qz - pz))


def clip_convex(subject, clip):
    """Clip `subject` polygon by convex `clip` polygon (both CCW).

    Returns the intersection polygon vertex list; arithmetic runs in the
    scalar type of the inputs, so autodiff vertices stay differentiable.
    """
    out = list(subject)
    n = len(clip)
    for i in range(n):
        if not out:
            return []
        ax, az = clip[i]
        bx, bz = clip[(i + 1) % n]
        ex = bx - ax
        ez = bz - az
        exf, ezf = _scalar(ex), _scalar(ez)
        axf, azf = _scalar(ax), _scalar(az)

        def side(p):
            return exf * (_scalar(p[1]) - azf) - ezf * (_scalar(p[0]) - axf)

        inp = out
        out = []
        prev = inp[-1]
        prev_s = side(prev)
        for cur in inp:
            cur_s = side(cur)
            if cur_s >= 0:
                if prev_s < 0:
                    out.append(_edge_intersect(prev, cur, (ax, az), (ex, ez)))
                out.append(cur)
            elif prev_s >= 0:
                out.append(_edge_intersect(prev, cur, (ax, az), (ex, ez)))
            prev, prev_s = cur, cur_s
    return out


def bev_overlap_area(corners_a, corners_b):
    """Intersection area of two convex CCW polygons; scalar-type generic."""
    return poly_area(clip_convex(corners_a, corners_b))


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------

def bev_iou(a: Box3D, b: Box3D) -> float:
    """Rotated-rectangle IoU in the BEV plane, exact up to floating error."""
    ca = [tuple(p) for p in a.bev_corners()]
    cb = [tuple(p) for p in b.bev_corners()]
    inter = _scalar(bev_overlap_area(ca, cb))
    union = a.w * a.l + b.w * b.l - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iou3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: BEV intersection area times vertical overlap, union by
    inclusion-exclusion."""
    ca = [tuple(p) for p in a.bev_corners()]
    cb = [tuple(p) for p in b.bev_corners()]
    inter_bev = _scalar(bev_overlap_area(ca, cb))
    lo = max(a.y_span()[0], b.y_span()[0])
    hi = min(a.y_span()[1], b.y_span()[1])
    inter = inter_bev * max(0.0, hi - lo)
    union = a.w * a.l * a.h + b.w * b.l * b.h - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


# ---------------------------------------------------------------------------
# AP computation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    """Matching thresholds and binning for AP evaluation.

    iou_thresholds are per class id (car, pedestrian); distance bins are
    half-open [lo, hi) intervals of BEV range from the ego origin.
    """

    iou_thresholds: tuple[float, ...] = (0.2, 0.1)
    n_recall: int = 40
    distance_bins: tuple[tuple[float, float], ...] = ((0.0, 30.0), (30.0, 50.0),
                                                      (50.0, 80.0))
    mode: str = "3d"

    def __post_init__(self):
        for t in self.iou_thresholds:
            if not 0.0 < t < 1.0:
                raise ValueError(f"iou threshold {t} outside (0,1)")
        prev_hi = -np.inf
        for lo, hi in self.distance_bins:
            if not (hi > lo and lo >= prev_hi):
                raise ValueError("distance bins must be ascending and disjoint")
            prev_hi = hi
        if self.mode not in ("3d", "bev"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.n_recall < 1:
            raise ValueError("n_recall must be positive")

    def iou_fn(self):
        return iou3d if self.mode == "3d" else bev_iou

    def bin_label(self, idx: int) -> str:
        lo, hi = self.distance_bins[idx]
        return f"{lo:g}-{hi:g}m"

    def bin_of(self, box: Box3D) -> int:
        """Bin index for a box center, or -1 when outside every bin."""
        dist = float(np.hypot(box.x, box.z))
        for i, (lo, hi) in enumerate(self.distance_bins):
            if lo <= dist < hi:
                return i
        return -1


def match_scene(preds, labels, threshold: float, iou_fn):
    """Greedy one-to-one matching in descending score order.

    preds: [(Box3D, score)], labels: [Box3D].  Returns (scores, tp flags)
    aligned with the score-sorted predictions.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
    taken = [False] * len(labels)
    scores = np.empty(len(preds))
    tps = np.zeros(len(preds), dtype=bool)
    for rank, i in enumerate(order):
        box, score = preds[i]
        scores[rank] = score
        best_j = -1
        best_iou = threshold
        for j, lab in enumerate(labels):
            if taken[j]:
                continue
            v = iou_fn(box, lab)
            if v >= best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0:
            taken[best_j] = True
            tps[rank] = True
    return scores, tps


def _interpolated_ap(scores, tps, n_labels: int, n_recall: int) -> float:
    if n_labels == 0:
        raise ValueError("AP undefined without labels")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = tps[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    recall = cum_tp / n_labels
    precision = cum_tp / (cum_tp + cum_fp)
    pmax_right = np.maximum.accumulate(precision[::-1])[::-1]
    rs = (np.arange(n_recall) + 1) / n_recall
    idx = np.searchsorted(recall, rs - 1e-12, side="left")
    total = sum(pmax_right[i] if i < len(recall) else 0.0 for i in idx)
    return float(total / n_recall)


def compute_ap(scene_preds, scene_labels, cfg: EvalConfig):
    """AP per (class id, bin index) over a set of scenes.

    scene_preds: per scene, [(Box3D, score)]; scene_labels: per scene,
    [Box3D].  Matching is per scene within each (class, bin) cell; pooled
    scores build one PR curve per cell.  Cells with zero labels map to
    None (absent, not zero).
    """
    if len(scene_preds) != len(scene_labels):
        raise ValueError("prediction/label scene counts differ")
    iou_fn = cfg.iou_fn()
    out = {}
    for cls in range(len(CLASS_NAMES)):
        thr = cfg.iou_thresholds[cls]
        for b in range(len(cfg.distance_bins)):
            all_scores = []
            all_tps = []
            n_labels = 0
            for preds, labels in zip(scene_preds, scene_labels):
                p_cell = [(box, s) for box, s in preds
                          if box.cls == cls and cfg.bin_of(box) == b]
                l_cell = [lab for lab in labels
                          if lab.cls == cls and cfg.bin_of(lab) == b]
                n_labels += len(l_cell)
                scores, tps = match_scene(p_cell, l_cell, thr, iou_fn)
                all_scores.append(scores)
                all_tps.append(tps)
            if n_labels == 0:
                out[(cls, b)] = None
                continue
            scores = np.concatenate(all_scores) if all_scores else np.empty(0)
            tps = np.concatenate(all_tps) if all_tps else np.empty(0, dtype=bool)
            out[(cls, b)] = _interpolated_ap(scores, tps, n_labels, cfg.n_recall)
    return out


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def report(records, cfg: EvalConfig, modes=("3d", "bev")):
    """Aggregate per-condition AP rows over scene records.

    records: [{"condition": str, "detections": [(Box3D, score)],
    "labels": [Box3D]}].  Returns row dicts sorted by (condition, class,
    bin, mode); cells without labels are omitted.
    """
    by_condition: dict[str, list] = {}
    for rec in records:
        by_condition.setdefault(rec["condition"], []).append(rec)
    rows = []
    for condition in sorted(by_condition):
        group = by_condition[condition]
        preds = [r["detections"] for r in group]
        labels = [r["labels"] for r in group]
        for mode in modes:
            mode_cfg = EvalConfig(iou_thresholds=cfg.iou_thresholds,
                                  n_recall=cfg.n_recall,
                                  distance_bins=cfg.distance_bins, mode=mode)
            aps = compute_ap(preds, labels, mode_cfg)
            for (cls, b), ap in aps.items():
                if ap is None:
                    continue
                rows.append({"condition": condition,
                             "class": CLASS_NAMES[cls],
                             "bin": cfg.bin_label(b),
                             "mode": mode,
                             "ap": ap,
                             "_sort": (condition, cls, b, mode)})
    rows.sort(key=lambda r: r["_sort"])
    for r in rows:
        del r["_sort"]
    return rows


def rows_to_csv(rows) -> str:
    lines = ["condition,class,bin,mode,ap"]
    for r in rows:
        lines.append(f"{r['condition']},{r['class']},{r['bin']},{r['mode']},"
                     f"{r['ap']:.6f}")
    return "\n".join(lines) + "\n"


def rows_to_json(rows) -> str:
    return json.dumps(rows, indent=2, sort_keys=True) + "\n"
