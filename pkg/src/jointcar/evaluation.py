"""Sliding-window scoring, NMS, truth matching and miss-rate/FPPI curves.

The log-average miss rate here is the arithmetic mean of the miss rate
read off the curve at nine FPPI values 10**(-2 + k/4), k = 0..8. At each
of those values the curve is treated as a step function: the miss rate
of the last point whose FPPI does not exceed the sample is used. Every
curve starts at (fppi 0, miss rate 1) for the "nothing detected" threshold.
"""
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as net
from .dataset import WINDOW_H, WINDOW_W
from .image_io import build_channel_stack, window_to_input

log = logging.getLogger(__name__)

FPPI_SAMPLES = tuple(10.0 ** (-2 + 0.25 * k) for k in range(9))
LAMR_METHOD = "arithmetic-mean-miss-rate-at-9-log-spaced-fppi"


@dataclass(frozen=True)
class DetectionRecord:
    scene_id: str
    row: int
    col: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def anchor(self):
        return (self.row, self.col)


def window_anchors(height, width, stride_r, stride_c):
    if stride_r < 1 or stride_c < 1:
        raise ValueError("strides must be >= 1")
    if height < WINDOW_H or width < WINDOW_W:
        return []
    return [(r, c) for r in range(0, height - WINDOW_H + 1, stride_r)
            for c in range(0, width - WINDOW_W + 1, stride_c)]


def window_stacks(image, anchors):
    """(N, 3, 84, 28) float32 network inputs for the windows at ``anchors``."""
    wins = np.stack([image[r:r + WINDOW_H, c:c + WINDOW_W] for r, c in anchors])
    return build_channel_stack(window_to_input(wins)).astype(np.float32)


def sliding_window_scores(scene, params, stride_r=4, stride_c=4, chunk=512):
    """Score every stride-grid window of a test scene with the full network."""
    h, w = scene.image.shape
    anchors = window_anchors(h, w, stride_r, stride_c)
    if not anchors:
        log.warning("scene %s (%dx%d) is smaller than the %dx%d window; skipped",
                    scene.scene_id, h, w, WINDOW_H, WINDOW_W)
        return []
    out = []
    for i in range(0, len(anchors), chunk):
        part = anchors[i:i + chunk]
        scores = net.predict(params, window_stacks(scene.image, part))
        out += [DetectionRecord(scene.scene_id, r, c, float(s)) for (r, c), s in zip(part, scores)]
    return out


def _order(records):
    return sorted(records, key=lambda d: (-d.score, d.scene_id, d.row, d.col))


def non_max_suppression(records, radius_r, radius_c):
    """Greedy NMS: keep a record unless a kept record in the same scene lies
    within radius_r rows and radius_c columns."""
    kept = []
    by_scene = {}
    for d in _order(records):
        others = by_scene.setdefault(d.scene_id, [])
        if any(abs(d.row - k.row) <= radius_r and abs(d.col - k.col) <= radius_c for k in others):
            continue
        others.append(d)
        kept.append(d)
    return kept


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    detections: list  # sorted by descending score
    is_tp: list


def match_detections(dets, truths, tol_r=10, tol_c=25):
    """Greedy one-to-one matching of one scene's detections to its truths.

    Detections are visited by descending score; each claims the nearest
    unmatched truth within (tol_r, tol_c), nearest meaning the smallest
    max(|dr|/tol_r, |dc|/tol_c), ties by truth order.
    """
    dets = _order(dets)
    free = list(range(len(truths)))
    flags = []
    for d in dets:
        best, best_dist = None, None
        for t in free:
            dr = abs(d.row - truths[t][0])
            dc = abs(d.col - truths[t][1])
            if dr <= tol_r and dc <= tol_c:
                dist = max(dr / max(tol_r, 1e-12), dc / max(tol_c, 1e-12))
                if best is None or dist < best_dist:
                    best, best_dist = t, dist
        if best is None:
            flags.append(False)
        else:
            free.remove(best)
            flags.append(True)
    tp = sum(flags)
    return MatchResult(tp, len(dets) - tp, len(truths) - tp, dets, flags)


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    fppi: float
    miss_rate: float
    tp: int
    fp: int
    fn: int


@dataclass
class EvalCurve:
    points: list
    n_scenes: int
    n_truths: int
    labeled: list = field(default_factory=list)  # (DetectionRecord, is_tp), score-descending

    @property
    def lamr(self):
        return log_average_miss_rate(self)

    def counts_at(self, threshold):
        """(tp, fp, fn) using detections scoring >= threshold."""
        best = self.points[0]
        for p in self.points:
            if p.threshold >= threshold:
                best = p
        return best.tp, best.fp, best.fn


def miss_rate_curve(records, truths_by_scene, tol_r=10, tol_c=25):
    """Sweep the score threshold over all records.

    ``truths_by_scene`` maps every evaluated scene id (including scenes
    without cars) to its list of (row, col) anchors.
    """
    n_truths = sum(len(t) for t in truths_by_scene.values())
    if n_truths < 1:
        raise ValueError("at least one ground truth is required")
    n_scenes = len(truths_by_scene)
    per_scene = {}
    for d in records:
        if d.scene_id not in truths_by_scene:
            raise ValueError(f"detection in unknown scene {d.scene_id!r}")
        per_scene.setdefault(d.scene_id, []).append(d)
    labeled = []
    for sid, dets in per_scene.items():
        m = match_detections(dets, truths_by_scene[sid], tol_r, tol_c)
        labeled += list(zip(m.detections, m.is_tp))
    labeled.sort(key=lambda p: (-p[0].score, p[0].scene_id, p[0].row, p[0].col))
    points = [CurvePoint(math.inf, 0.0, 1.0, 0, 0, n_truths)]
    tp = fp = 0
    for i, (d, hit) in enumerate(labeled):
        tp += hit
        fp += not hit
        last_of_score = i + 1 == len(labeled) or labeled[i + 1][0].score != d.score
        if last_of_score:
            fn = n_truths - tp
            points.append(CurvePoint(d.score, fp / n_scenes, fn / n_truths, tp, fp, fn))
    return EvalCurve(points, n_scenes, n_truths, labeled)


def log_average_miss_rate(curve):
    points = curve.points if isinstance(curve, EvalCurve) else list(curve)
    if not points:
        raise ValueError("empty curve")
    values = []
    for ref in FPPI_SAMPLES:
        mr = 1.0
        for p in points:
            if p.fppi <= ref:
                mr = p.miss_rate
        values.append(mr)
    return math.fsum(values) / len(values)


def evaluate_scenes(params, scenes, cfg, pool=None):
    """Score, suppress and match a list of TestScenes. Returns (curve, records)."""
    def score(scene):
        recs = sliding_window_scores(scene, params, cfg.stride_r, cfg.stride_c)
        return non_max_suppression(recs, cfg.nms_radius_r, cfg.nms_radius_c)

    per_scene = list(pool.map(score, scenes)) if pool else [score(s) for s in scenes]
    records = [d for recs in per_scene for d in recs]
    truths = {s.scene_id: list(s.ground_truths) for s in scenes}
    curve = miss_rate_curve(records, truths, cfg.match_tol_r, cfg.match_tol_c)
    return curve, records


def write_outputs(curve, out_dir, threshold=0.5):
    """detections.csv, curve.csv, summary.csv and curve_plot.dat under out_dir."""
    import os
    with open(os.path.join(out_dir, "detections.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "row", "col", "score", "label"])
        for d, hit in curve.labeled:
            w.writerow([d.scene_id, d.row, d.col, f"{d.score:.8g}", "tp" if hit else "fp"])
    with open(os.path.join(out_dir, "curve.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fppi", "miss_rate"])
        for p in curve.points:
            w.writerow([f"{p.threshold:.8g}", f"{p.fppi:.8g}", f"{p.miss_rate:.8g}"])
    tp, fp, fn = curve.counts_at(threshold)
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lamr", "tp", "fp", "fn", "n_scenes", "n_truths", "threshold", "lamr_method"])
        w.writerow([f"{curve.lamr:.8g}", tp, fp, fn, curve.n_scenes, curve.n_truths,
                    threshold, LAMR_METHOD])
    with open(os.path.join(out_dir, "curve_plot.dat"), "w") as fh:
        fh.write("# fppi miss_rate  (plot with log-scaled x; fppi=0 rows sit left of the axis)\n")
        for p in curve.points:
            fh.write(f"{p.fppi:.8g} {p.miss_rate:.8g}\n")
