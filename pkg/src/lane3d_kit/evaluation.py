"""Benchmark metric protocols.

Two protocols are implemented:

* OpenLane/ApolloSim style: lanes are resampled onto a fixed y grid,
  predictions and ground truth are paired by minimum total cost, a pair is
  a true positive when enough of its mutually visible points lie within
  the point threshold, and F1/AP plus near/far x/z errors are reported
  over score thresholds.
* ONCE style: lanes are rasterized on a top-view grid, pairs are gated by
  IoU, matched by unilateral Chamfer distance, and a true positive needs
  that distance below the CD threshold.

Frames evaluate independently; corpus metrics aggregate raw TP/FP/FN
counts rather than per-frame averages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lanes import Lane3D
from .losses import solve_assignment


@dataclass
class EvalConfigOL:
    """OpenLane-style protocol constants.

    ``near_range`` is half-open [lo, hi); ``far_range`` is closed [lo, hi].
    """

    tp_point_threshold: float = 1.5
    tp_fraction: float = 0.75
    near_range: tuple[float, float] = (0.0, 40.0)
    far_range: tuple[float, float] = (40.0, 100.0)
    y_eval_samples: np.ndarray = field(default_factory=lambda: np.linspace(3.0, 103.0, 20))

    def __post_init__(self):
        self.y_eval_samples = np.asarray(self.y_eval_samples, dtype=np.float64)
        if not 0.0 < self.tp_fraction <= 1.0:
            raise ValueError("tp_fraction must be in (0, 1]")
        if self.tp_point_threshold <= 0:
            raise ValueError("tp_point_threshold must be positive")

    def to_json_dict(self) -> dict:
        return {
            "tp_point_threshold": self.tp_point_threshold,
            "tp_fraction": self.tp_fraction,
            "near_range": list(self.near_range),
            "far_range": list(self.far_range),
            "y_eval_samples": self.y_eval_samples.tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "EvalConfigOL":
        return cls(
            tp_point_threshold=float(d["tp_point_threshold"]),
            tp_fraction=float(d["tp_fraction"]),
            near_range=tuple(d["near_range"]),
            far_range=tuple(d["far_range"]),
            y_eval_samples=np.array(d["y_eval_samples"], dtype=np.float64),
        )


@dataclass
class EvalConfigONCE:
    """ONCE-style protocol constants.

    Lanes are drawn on the top view by filling every grid cell within
    ``lane_width`` meters of the polyline (a stroke of that radius); with
    the narrower reading a sub-threshold lateral shift could never pass
    the IoU gate, contradicting the protocol's own expected behavior.
    """

    iou_threshold: float = 0.3
    tau_cd: float = 0.3
    lane_width: float = 0.3
    grid_cell: float = 0.1

    def __post_init__(self):
        for name in ("iou_threshold", "tau_cd", "lane_width", "grid_cell"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_json_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "tau_cd": self.tau_cd,
            "lane_width": self.lane_width,
            "grid_cell": self.grid_cell,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "EvalConfigONCE":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class ThresholdCounts:
    """TP/FP/FN and derived rates at one score threshold."""

    threshold: float
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_json_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass
class EvalReport:
    """OpenLane-style corpus report; headline figures are percents."""

    f1: float
    ap: float
    category_accuracy: float
    ex_near: float
    ex_far: float
    ez_near: float
    ez_far: float
    counts: list[ThresholdCounts]
    best_threshold: float
    empty_gt_frames: list[int]

    def to_json_dict(self) -> dict:
        return {
            "f1": self.f1,
            "ap": self.ap,
            "category_accuracy": self.category_accuracy,
            "ex_near": self.ex_near,
            "ex_far": self.ex_far,
            "ez_near": self.ez_near,
            "ez_far": self.ez_far,
            "best_threshold": self.best_threshold,
            "counts": [c.to_json_dict() for c in self.counts],
            "empty_gt_frames": self.empty_gt_frames,
        }


@dataclass
class ResampledLane:
    """A lane interpolated onto the shared evaluation y grid."""

    x: np.ndarray
    z: np.ndarray
    vis: np.ndarray  # boolean per eval sample
    category: int
    score: float | None


def resample_lane(lane: Lane3D, y_eval: np.ndarray) -> ResampledLane:
    """Linearly interpolate a lane onto the evaluation grid.

    Samples outside the lane's own y extent are invisible; within it,
    visibility is interpolated and thresholded at 0.5.
    """
    y_eval = np.asarray(y_eval, dtype=np.float64)
    within = (y_eval >= lane.y[0]) & (y_eval <= lane.y[-1])
    x = np.interp(y_eval, lane.y, lane.x)
    z = np.interp(y_eval, lane.y, lane.z)
    vis = np.interp(y_eval, lane.y, lane.visibility)
    return ResampledLane(
        x=x, z=z, vis=within & (vis >= 0.5), category=lane.category, score=lane.score
    )


def lane_pair_cost(
    gt: ResampledLane, pred: ResampledLane, cfg: EvalConfigOL
) -> tuple[float, np.ndarray]:
    """Matching cost between two resampled lanes plus per-point distances.

    Points where either lane is invisible get the capped distance (the TP
    point threshold) so partially overlapping lanes are penalized but stay
    matchable; the cost is the square root of the distance sum.
    """
    mutual = gt.vis & pred.vis
    d = np.full(gt.x.shape[0], cfg.tp_point_threshold, dtype=np.float64)
    d[mutual] = np.sqrt(
        (gt.x[mutual] - pred.x[mutual]) ** 2 + (gt.z[mutual] - pred.z[mutual]) ** 2
    )
    return float(np.sqrt(d.sum())), d


def _pair_is_tp(gt: ResampledLane, d: np.ndarray, cfg: EvalConfigOL) -> bool:
    # Denominator is the GT-visible point count: a perfect prediction of a
    # partially visible lane must still count as a hit.
    visible = int(np.count_nonzero(gt.vis))
    if visible == 0:
        return False
    close = int(np.count_nonzero(d < cfg.tp_point_threshold))
    return close / visible > cfg.tp_fraction


def _match_resampled(
    gts: list[ResampledLane], preds: list[ResampledLane], cfg: EvalConfigOL
) -> list[tuple[int, int, np.ndarray]]:
    if not gts or not preds:
        return []
    cost = np.empty((len(gts), len(preds)))
    dists: dict[tuple[int, int], np.ndarray] = {}
    for i, g in enumerate(gts):
        for j, p in enumerate(preds):
            cost[i, j], dists[i, j] = lane_pair_cost(g, p, cfg)
    return [(i, j, dists[i, j]) for i, j in solve_assignment(cost)]


def match_lanes(
    gts: list[Lane3D], preds: list[Lane3D], cfg: EvalConfigOL
) -> list[tuple[int, int]]:
    """Minimum-total-cost one-to-one pairing between GT and predictions."""
    y = cfg.y_eval_samples
    pairs = _match_resampled(
        [resample_lane(g, y) for g in gts], [resample_lane(p, y) for p in preds], cfg
    )
    return [(i, j) for i, j, _ in pairs]


def _prepare_frame(gts, preds, cfg):
    y = cfg.y_eval_samples
    gt_rs = [r for r in (resample_lane(g, y) for g in gts) if np.any(r.vis)]
    pred_rs = []
    for p in preds:
        if p.score is None:
            raise ValueError("predictions must carry scores for evaluation")
        r = resample_lane(p, y)
        if np.any(r.vis):
            pred_rs.append(r)
    return gt_rs, pred_rs


def _counts_at(prepared, threshold, cfg):
    tp = fp = fn = 0
    for gt_rs, pred_rs in prepared:
        kept = [p for p in pred_rs if p.score >= threshold]
        pairs = _match_resampled(gt_rs, kept, cfg)
        hit_gt = set()
        hit_pred = set()
        for gi, pi, d in pairs:
            if _pair_is_tp(gt_rs[gi], d, cfg):
                tp += 1
                hit_gt.add(gi)
                hit_pred.add(pi)
        fn += len(gt_rs) - len(hit_gt)
        fp += len(kept) - len(hit_pred)
    return tp, fp, fn


def _average_precision(counts: list[ThresholdCounts]) -> float:
    points = [(c.recall, c.precision) for c in counts]
    recalls = sorted({r for r, _ in points})
    ap = 0.0
    prev = 0.0
    for r in recalls:
        envelope = max(p for rr, p in points if rr >= r)
        ap += (r - prev) * envelope
        prev = r
    return ap


def evaluate_openlane(frames, cfg: EvalConfigOL) -> EvalReport:
    """Evaluate a corpus of (gt lanes, predicted lanes) frames.

    Reported F1 is the maximum over score thresholds; category accuracy
    and the near/far coordinate errors are taken at that operating point,
    pooling mutually visible points across all true-positive pairs.
    Frames with neither usable ground truth nor predictions are skipped
    and flagged in the report.
    """
    prepared = []
    empty_frames = []
    for idx, (gts, preds) in enumerate(frames):
        gt_rs, pred_rs = _prepare_frame(gts, preds, cfg)
        if not gt_rs:
            empty_frames.append(idx)
            if not pred_rs:
                continue
        prepared.append((gt_rs, pred_rs))

    thresholds = sorted(
        {p.score for gt_rs, pred_rs in prepared for p in pred_rs}, reverse=True
    )
    if not thresholds:
        thresholds = [1.0]
    counts = [ThresholdCounts(t, *_counts_at(prepared, t, cfg)) for t in thresholds]

    best = counts[0]
    for c in counts:
        if c.f1 > best.f1 or (c.f1 == best.f1 and c.threshold < best.threshold):
            best = c

    y = cfg.y_eval_samples
    near = (y >= cfg.near_range[0]) & (y < cfg.near_range[1])
    far = (y >= cfg.far_range[0]) & (y <= cfg.far_range[1])
    ex_near, ex_far, ez_near, ez_far = [], [], [], []
    cat_hits = 0
    tp_total = 0
    for gt_rs, pred_rs in prepared:
        kept = [p for p in pred_rs if p.score >= best.threshold]
        pairs = _match_resampled(gt_rs, kept, cfg)
        for gi, pi, d in pairs:
            g, p = gt_rs[gi], kept[pi]
            if not _pair_is_tp(g, d, cfg):
                continue
            tp_total += 1
            if p.category == g.category:
                cat_hits += 1
            mutual = g.vis & p.vis
            ex = np.abs(g.x - p.x)
            ez = np.abs(g.z - p.z)
            ex_near.extend(ex[mutual & near].tolist())
            ex_far.extend(ex[mutual & far].tolist())
            ez_near.extend(ez[mutual & near].tolist())
            ez_far.extend(ez[mutual & far].tolist())

    def mean(values):
        return float(np.mean(values)) if values else 0.0

    return EvalReport(
        f1=100.0 * best.f1,
        ap=100.0 * _average_precision(counts),
        category_accuracy=100.0 * cat_hits / tp_total if tp_total else 0.0,
        ex_near=mean(ex_near),
        ex_far=mean(ex_far),
        ez_near=mean(ez_near),
        ez_far=mean(ez_far),
        counts=counts,
        best_threshold=best.threshold,
        empty_gt_frames=empty_frames,
    )


# --- ONCE-style protocol ---------------------------------------------------


def _visible_polyline(lane: Lane3D) -> np.ndarray:
    """(K, 2) top-view (x, y) points of the lane's visible samples."""
    mask = lane.visible_mask
    return np.stack([lane.x[mask], lane.y[mask]], axis=1)


def rasterize_top_view(poly: np.ndarray, cfg: EvalConfigONCE) -> set:
    """Cells of the top-view grid within ``lane_width`` of the polyline."""
    cells: set = set()
    if poly.shape[0] == 0:
        return cells
    cell = cfg.grid_cell
    reach = int(np.ceil(cfg.lane_width / cell))
    offsets = [
        (di, dj)
        for di in range(-reach, reach + 1)
        for dj in range(-reach, reach + 1)
    ]
    samples = [poly[0]]
    for a, b in zip(poly[:-1], poly[1:]):
        seg = b - a
        length = float(np.hypot(*seg))
        steps = max(1, int(np.ceil(length / (cell * 0.5))))
        for s in range(1, steps + 1):
            samples.append(a + seg * (s / steps))
    for px, py in samples:
        ci, cj = round(px / cell), round(py / cell)
        for di, dj in offsets:
            ix, iy = ci + di, cj + dj
            if (ix * cell - px) ** 2 + (iy * cell - py) ** 2 <= cfg.lane_width ** 2:
                cells.add((ix, iy))
    return cells


def _point_to_polyline_distance(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Distance from each (x, y) point to the nearest point on the polyline."""
    if poly.shape[0] == 1:
        return np.hypot(points[:, 0] - poly[0, 0], points[:, 1] - poly[0, 1])
    a = poly[:-1]
    seg = poly[1:] - a
    seg_len2 = np.maximum((seg ** 2).sum(axis=1), 1e-300)
    rel = points[:, None, :] - a[None, :, :]
    t = np.clip((rel * seg[None, :, :]).sum(axis=2) / seg_len2[None, :], 0.0, 1.0)
    proj = a[None, :, :] + t[:, :, None] * seg[None, :, :]
    return np.sqrt(((points[:, None, :] - proj) ** 2).sum(axis=2)).min(axis=1)


def unilateral_chamfer(pred: Lane3D, gt: Lane3D) -> float:
    """Mean top-view distance from the prediction's visible points to the
    ground-truth polyline."""
    pts = _visible_polyline(pred)
    poly = _visible_polyline(gt)
    if pts.shape[0] == 0 or poly.shape[0] == 0:
        return float("inf")
    return float(_point_to_polyline_distance(pts, poly).mean())


@dataclass
class OnceReport:
    """ONCE-style corpus report; rates are percents, cd_error in meters."""

    f1: float
    precision: float
    recall: float
    cd_error: float
    tp: int
    fp: int
    fn: int

    def to_json_dict(self) -> dict:
        return {
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
            "cd_error": self.cd_error,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
        }


_NON_CANDIDATE = 1e9


def evaluate_once(frames, cfg: EvalConfigONCE) -> OnceReport:
    """Evaluate frames under the top-view IoU + Chamfer-distance protocol."""
    tp = fp = fn = 0
    cd_hits: list[float] = []
    for gts, preds in frames:
        gts = [g for g in gts if g.num_visible() > 0]
        preds = [p for p in preds if p.num_visible() > 0]
        if not gts and not preds:
            continue
        if not gts or not preds:
            fn += len(gts)
            fp += len(preds)
            continue
        gt_cells = [rasterize_top_view(_visible_polyline(g), cfg) for g in gts]
        pred_cells = [rasterize_top_view(_visible_polyline(p), cfg) for p in preds]
        cd = np.empty((len(gts), len(preds)))
        candidate = np.zeros((len(gts), len(preds)), dtype=bool)
        for i, g in enumerate(gts):
            for j, p in enumerate(preds):
                union = len(gt_cells[i] | pred_cells[j])
                iou = len(gt_cells[i] & pred_cells[j]) / union if union else 0.0
                candidate[i, j] = iou >= cfg.iou_threshold
                cd[i, j] = unilateral_chamfer(p, g)
        cost = np.where(candidate, cd, _NON_CANDIDATE)
        matched_gt = set()
        matched_pred = set()
        for i, j in solve_assignment(cost):
            if not candidate[i, j]:
                continue
            if cd[i, j] < cfg.tau_cd:
                tp += 1
                cd_hits.append(float(cd[i, j]))
                matched_gt.add(i)
                matched_pred.add(j)
        fn += len(gts) - len(matched_gt)
        fp += len(preds) - len(matched_pred)

    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return OnceReport(
        f1=100.0 * f1,
        precision=100.0 * precision,
        recall=100.0 * recall,
        cd_error=float(np.mean(cd_hits)) if cd_hits else 0.0,
        tp=tp,
        fp=fp,
        fn=fn,
    )


def format_report_table(report: EvalReport) -> str:
    """Plain-text single-row table with the usual benchmark column layout."""
    header = f"{'F1':>7} {'CAcc':>7} {'Ex/N':>7} {'Ex/F':>7} {'Ez/N':>7} {'Ez/F':>7} {'AP':>7}"
    row = (
        f"{report.f1:7.2f} {report.category_accuracy:7.2f} "
        f"{report.ex_near:7.3f} {report.ex_far:7.3f} "
        f"{report.ez_near:7.3f} {report.ez_far:7.3f} {report.ap:7.2f}"
    )
    return header + "\n" + row
