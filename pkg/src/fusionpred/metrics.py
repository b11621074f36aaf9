"""Detection, trajectory and tracking metrics plus the versioned report format."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import CLASS_NAMES, Box3D, bev_iou

REPORT_VERSION = 1
AP_POINTS = 41


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = (0.5, 0.7, 0.5)  # pedestrian, car, cyclist
    top_k: tuple = (3, 5, 10)
    match_distance: float = 2.0  # meters, tracking evaluation gate

    def __post_init__(self):
        if any(not 0 < t <= 1 for t in self.iou_thresholds):
            raise ValueError(f"IoU thresholds must lie in (0, 1], got {self.iou_thresholds}")
        if any(k < 1 for k in self.top_k):
            raise ValueError(f"top-k values must be positive, got {self.top_k}")


def _frames(boxes):
    """Accept a single frame (list of boxes) or a list of frames."""
    if len(boxes) and isinstance(boxes[0], Box3D):
        return [list(boxes)]
    return [list(f) for f in boxes]


def precision_recall(detections, ground_truth, cls: int, threshold: float):
    """Confidence-ranked greedy matching; returns ``(precision, recall, n_gt)`` arrays.

    Detections are ranked by confidence with ties kept in input order
    (frame-major); each claims the unmatched same-frame ground-truth box of
    highest IoU at or above ``threshold``.
    """
    det_frames, gt_frames = _frames(detections), _frames(ground_truth)
    # an empty list pairs with a single frame on the other side
    if not det_frames and len(gt_frames) == 1:
        det_frames = [[]]
    if not gt_frames and len(det_frames) == 1:
        gt_frames = [[]]
    if len(det_frames) != len(gt_frames):
        raise ValueError(f"{len(det_frames)} detection frames vs {len(gt_frames)} ground-truth frames")
    gts = [[g for g in f if g.cls == cls] for f in gt_frames]
    n_gt = sum(len(f) for f in gts)
    dets = [(d.confidence, fi, d) for fi, f in enumerate(det_frames) for d in f if d.cls == cls]
    order = sorted(range(len(dets)), key=lambda i: -dets[i][0])
    used = [np.zeros(len(f), dtype=bool) for f in gts]
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        _, fi, det = dets[i]
        best, best_j = threshold, -1
        for j, g in enumerate(gts[fi]):
            if used[fi][j]:
                continue
            iou = bev_iou(det, g)
            if iou >= best and (best_j < 0 or iou > best):
                best, best_j = iou, j
        if best_j >= 0:
            used[fi][best_j] = True
            tp[rank] = 1
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1) if len(tp) else np.zeros(0)
    recall = ctp / n_gt if n_gt else np.zeros_like(ctp)
    return precision, recall, n_gt


def interpolated_ap(precision: np.ndarray, recall: np.ndarray, points: int = AP_POINTS) -> float:
    best = []
    for r in np.linspace(0.0, 1.0, points):
        sel = precision[recall >= r - 1e-12]
        best.append(float(sel.max()) if len(sel) else 0.0)
    return math.fsum(best) / points  # correctly rounded, so rational cases come out exact


def average_precision(detections, ground_truth, cls: int, config: EvalConfig = EvalConfig()):
    """41-point interpolated BEV AP for one class; ``None`` when there is no ground truth."""
    p, r, n_gt = precision_recall(detections, ground_truth, cls, config.iou_thresholds[cls])
    if n_gt == 0:
        return None
    return interpolated_ap(p, r)


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= len(scores):
        raise ValueError(f"k={k} must be between 1 and {len(scores)}")
    return np.argsort(-scores, kind="stable")[:k]


def min_ade(predictions: np.ndarray, scores: np.ndarray, truth: np.ndarray, k: int) -> float:
    """Smallest mean displacement among the ``k`` highest-scoring predictions."""
    sel = np.asarray(predictions)[_top_k(scores, k)]
    return float(np.linalg.norm(sel - truth, axis=-1).mean(axis=-1).min())


def min_fde(predictions: np.ndarray, scores: np.ndarray, truth: np.ndarray, k: int) -> float:
    sel = np.asarray(predictions)[_top_k(scores, k)]
    return float(np.linalg.norm(sel[:, -1] - np.asarray(truth)[-1], axis=-1).min())


@dataclass
class TrackingReport:
    frames: int = 0
    gt_count: int = 0
    matches: int = 0
    misses: int = 0
    false_tracks: int = 0
    id_switches: int = 0
    coverage: dict = field(default_factory=dict)  # gt id -> fraction of visible frames matched
    assignment: dict = field(default_factory=dict)  # (frame, track id) -> gt id

    @property
    def mota(self) -> float:
        if self.gt_count == 0:
            return 0.0
        return 1.0 - (self.misses + self.false_tracks + self.id_switches) / self.gt_count


def tracking_report(track_frames: Sequence, gt_frames: Sequence, config: EvalConfig = EvalConfig()) -> TrackingReport:
    """Per-frame optimal matching of tracks to ground truth by BEV centre distance.

    ``track_frames[f]`` and ``gt_frames[f]`` are lists of ``(id, Box3D)``;
    only same-class pairs within ``match_distance`` can match.  A switch is
    counted when a ground-truth agent is matched to a different track id
    than at its previous match.
    """
    rep = TrackingReport(frames=len(gt_frames))
    last_track: dict = {}
    seen: dict = {}
    hit: dict = {}
    for f, gts in enumerate(gt_frames):
        tracks = track_frames[f] if f < len(track_frames) else []
        rep.gt_count += len(gts)
        for gid, _ in gts:
            seen[gid] = seen.get(gid, 0) + 1
        cost = np.full((len(gts), len(tracks)), 1e6)
        for i, (_, g) in enumerate(gts):
            for j, (_, t) in enumerate(tracks):
                d = float(np.hypot(*(g.center[:2] - t.center[:2])))
                if g.cls == t.cls and d <= config.match_distance:
                    cost[i, j] = d
        pairs = []
        if cost.size:
            rows, cols = linear_sum_assignment(cost)
            pairs = [(r, c) for r, c in zip(rows, cols) if cost[r, c] < 1e6]
        rep.matches += len(pairs)
        rep.misses += len(gts) - len(pairs)
        rep.false_tracks += len(tracks) - len(pairs)
        for r, c in pairs:
            gid, tid = gts[r][0], tracks[c][0]
            if gid in last_track and last_track[gid] != tid:
                rep.id_switches += 1
            last_track[gid] = tid
            hit[gid] = hit.get(gid, 0) + 1
            rep.assignment[(f, tid)] = gid
    rep.coverage = {gid: hit.get(gid, 0) / n for gid, n in sorted(seen.items())}
    return rep


# --- report files -------------------------------------------------------------------

def format_value(v) -> str:
    if v is None:
        return "absent"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"


def write_report(records: Sequence[tuple], fmt: str = "text") -> str:
    """``records`` are ``(metric, class, value)``; output is sorted and versioned."""
    rows = sorted((str(m), str(c), format_value(v)) for m, c, v in records)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "class", "value"])
        w.writerows(rows)
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = [f"# fusionpred metrics report v{REPORT_VERSION}"]
    lines += [f"{m}\t{c}\t{v}" for m, c, v in rows]
    return "\n".join(lines) + "\n"


def read_report(text: str) -> dict:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# fusionpred metrics report v"):
        raise ValueError("not a metrics report")
    version = int(lines[0].rsplit("v", 1)[1])
    if version != REPORT_VERSION:
        raise ValueError(f"unsupported report version {version}")
    out = {}
    for line in lines[1:]:
        m, c, v = line.split("\t")
        out[(m, c)] = None if v == "absent" else float(v)
    return out


def class_name(cls: int) -> str:
    return CLASS_NAMES[cls] if 0 <= cls < len(CLASS_NAMES) else f"class{cls}"
