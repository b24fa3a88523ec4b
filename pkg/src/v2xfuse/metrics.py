"""Detection metrics: rotated IoU, greedy matching, P/R, RMSEs and 40-point AP."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError
from .geometry import OrientedBox3D, box_bev_corners

AP_RECALL_POINTS = 40
DEGENERATE_AREA = 1e-12  # m^2; smaller footprints make IoU numerically meaningless


def polygon_area(poly) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    p = np.asarray(poly, dtype=np.float64)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject, clipper) -> list:
    """Sutherland-Hodgman clip of ``subject`` by the convex CCW polygon ``clipper``."""
    out = [tuple(p) for p in subject]
    clip = [tuple(p) for p in clipper]
    for i in range(len(clip)):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % len(clip)]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        for j in range(len(inp)):
            cur, nxt = inp[j], inp[(j + 1) % len(inp)]
            sc, sn = side(cur), side(nxt)
            if sc >= 0:
                out.append(cur)
            if (sc >= 0) != (sn >= 0):
                t = sc / (sc - sn)
                out.append((cur[0] + t * (nxt[0] - cur[0]), cur[1] + t * (nxt[1] - cur[1])))
    return out


def _check(b: OrientedBox3D):
    if b.size[0] * b.size[1] <= DEGENERATE_AREA or b.size[2] <= math.sqrt(DEGENERATE_AREA):
        raise DomainError("degenerate zero-area box")


def bev_intersection(a: OrientedBox3D, b: OrientedBox3D) -> float:
    reach = 0.5 * (math.hypot(a.size[0], a.size[1]) + math.hypot(b.size[0], b.size[1]))
    if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) > reach:
        return 0.0
    return max(polygon_area(clip_polygon(box_bev_corners(a), box_bev_corners(b))), 0.0)


def iou_bev(a: OrientedBox3D, b: OrientedBox3D) -> float:
    _check(a)
    _check(b)
    inter = bev_intersection(a, b)
    union = a.footprint_area + b.footprint_area - inter
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: OrientedBox3D, b: OrientedBox3D) -> float:
    _check(a)
    _check(b)
    (a0, a1), (b0, b1) = a.z_extent(), b.z_extent()
    dz = max(0.0, min(a1, b1) - max(a0, b0))
    inter = bev_intersection(a, b) * dz
    union = a.volume + b.volume - inter
    return min(max(inter / union, 0.0), 1.0)


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)  # (pred index, gt index, bev iou)
    unmatched_preds: list = field(default_factory=list)
    unmatched_gts: list = field(default_factory=list)


def _score_order(preds) -> list:
    # stable: ties keep input order
    return sorted(range(len(preds)), key=lambda i: -(preds[i].score or 0.0))


def match(preds: Sequence[OrientedBox3D], gts: Sequence[OrientedBox3D],
          iou_threshold: float = 0.5) -> MatchResult:
    """Greedy same-class matching in descending score order."""
    claimed = set()
    result = MatchResult()
    for pi in _score_order(preds):
        p = preds[pi]
        best, best_iou = None, iou_threshold
        for gi, g in enumerate(gts):
            if gi in claimed or g.class_id != p.class_id:
                continue
            iou = iou_bev(p, g)
            if iou >= best_iou and (best is None or iou > best_iou):
                best, best_iou = gi, iou
        if best is None:
            result.unmatched_preds.append(pi)
        else:
            claimed.add(best)
            result.pairs.append((pi, best, best_iou))
    result.unmatched_gts = [gi for gi in range(len(gts)) if gi not in claimed]
    return result


def rotation_error(a: float, b: float) -> float:
    d = abs(a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


@dataclass
class DetectionMetrics:
    """None marks an undefined ratio (zero denominator)."""

    precision: Optional[float]
    recall: Optional[float]
    mean_iou: Optional[float]
    pos_rmse: Optional[float]
    rot_rmse: Optional[float]
    tp: int = 0
    fp: int = 0
    fn: int = 0


def dataset_metrics(frames, iou_threshold: float = 0.5, score_threshold: float = 0.0) -> DetectionMetrics:
    """Pool matching results over ``frames``, a sequence of (preds, gts) pairs."""
    tp = fp = fn = 0
    ious, pos_sq, rot_sq = [], [], []
    for preds, gts in frames:
        kept = [p for p in preds if (p.score if p.score is not None else 1.0) >= score_threshold]
        m = match(kept, gts, iou_threshold)
        tp += len(m.pairs)
        fp += len(m.unmatched_preds)
        fn += len(m.unmatched_gts)
        for pi, gi, _ in m.pairs:
            p, g = kept[pi], gts[gi]
            ious.append(iou_3d(p, g))
            pos_sq.append(sum((pc - gc) ** 2 for pc, gc in zip(p.center, g.center)))
            rot_sq.append(rotation_error(p.yaw, g.yaw) ** 2)

    def ratio(num, den):
        return num / den if den else None

    return DetectionMetrics(
        precision=ratio(tp, tp + fp),
        recall=ratio(tp, tp + fn),
        mean_iou=float(np.mean(ious)) if ious else None,
        pos_rmse=math.sqrt(sum(pos_sq) / len(pos_sq)) if pos_sq else None,
        rot_rmse=math.sqrt(sum(rot_sq) / len(rot_sq)) if rot_sq else None,
        tp=tp, fp=fp, fn=fn,
    )


def metrics(preds, gts, iou_threshold: float = 0.5, score_threshold: float = 0.0) -> DetectionMetrics:
    return dataset_metrics([(preds, gts)], iou_threshold, score_threshold)


@dataclass
class PrCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def interpolated(self) -> np.ndarray:
        """Precision envelope: max precision at any recall >= each sample's recall."""
        return np.maximum.accumulate(self.precision[::-1])[::-1] if len(self.precision) else self.precision


def pr_curve(frames, iou_threshold: float, class_id: int) -> PrCurve:
    """PR samples at every distinct score threshold, highest first."""
    scored = []  # (score, is_tp)
    n_gt = 0
    for preds, gts in frames:
        cp = [p for p in preds if p.class_id == class_id]
        cg = [g for g in gts if g.class_id == class_id]
        n_gt += len(cg)
        m = match(cp, cg, iou_threshold)
        hits = {pi for pi, _, _ in m.pairs}
        scored.extend((cp[i].score or 0.0, i in hits) for i in range(len(cp)))
    if not scored or n_gt == 0:
        return PrCurve(np.zeros(0), np.zeros(0), np.zeros(0))
    scored.sort(key=lambda s: -s[0])
    scores = np.array([s for s, _ in scored])
    tps = np.cumsum([t for _, t in scored])
    count = np.arange(1, len(scored) + 1)
    # one sample per tie group: after its last member
    last = np.r_[scores[1:] != scores[:-1], True]
    return PrCurve(scores[last], tps[last] / count[last], tps[last] / n_gt)


def interpolated_ap(curve: PrCurve, n_points: int = AP_RECALL_POINTS) -> float:
    if len(curve.recall) == 0:
        return 0.0
    env = curve.interpolated()
    total = 0.0
    for k in range(1, n_points + 1):
        r = k / n_points
        reach = curve.recall >= r - 1e-12
        total += float(env[reach].max()) if reach.any() else 0.0
    return total / n_points


def dataset_average_precision(frames, iou_threshold: float = 0.5, class_id: int = 0) -> float:
    return interpolated_ap(pr_curve(frames, iou_threshold, class_id))


def average_precision(preds, gts, iou_threshold: float = 0.5, class_id: int = 0) -> float:
    return dataset_average_precision([(preds, gts)], iou_threshold, class_id)


def mean_average_precision(frames, iou_threshold: float = 0.5) -> Optional[float]:
    """Mean AP over classes present in the ground truth (None without any gt)."""
    frames = list(frames)
    present = sorted({g.class_id for _, gts in frames for g in gts})
    if not present:
        return None
    return float(np.mean([dataset_average_precision(frames, iou_threshold, c) for c in present]))
