"""Matching, training losses, and their analytic gradients.

Ground-truth lanes are paired one-to-one with proposals by minimizing a
combined classification/geometry cost over injective assignments.  The
losses are the negative-log classification term over all proposals, a
visibility-masked L1 regression term over the assigned pairs, and an
equal-width regularizer that penalizes variation in pairwise lane widths
while exempting forks via a threshold gate.

Gradients are exposed with respect to proposal coordinates (x, z, vis) so
they can be verified against finite differences; at kinks of |.| terms the
subgradient 0 is used.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import AllInvisible, DegenerateSegment, LengthMismatch, ProbabilityUnderflow
from .head import Proposal
from .lanes import Lane3D

_PROB_FLOOR = 1e-30


@dataclass
class LossConfig:
    """Cost and loss coefficients plus the fork-exemption threshold (meters)."""

    beta_cls: float = 1.0
    beta_dis: float = 3.0
    lambda_cls: float = 1.0
    lambda_reg: float = 1.0
    lambda_ew: float = 0.1
    tau: float = 0.1

    def __post_init__(self):
        for name in ("beta_cls", "beta_dis", "lambda_cls", "lambda_reg", "lambda_ew"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")

    def to_json_dict(self) -> dict:
        return {
            "beta_cls": self.beta_cls,
            "beta_dis": self.beta_dis,
            "lambda_cls": self.lambda_cls,
            "lambda_reg": self.lambda_reg,
            "lambda_ew": self.lambda_ew,
            "tau": self.tau,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "LossConfig":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class Assignment:
    """Result of one-to-one matching.

    ``sigma`` maps ground-truth index to proposal index; ``positives`` lists
    the assigned proposal indices in ground-truth order; ``labels`` gives
    every proposal its class index, with unassigned proposals labeled
    ``non_lane_class``.
    """

    sigma: dict[int, int]
    positives: list[int]
    labels: np.ndarray
    non_lane_class: int


def matching_distance(gt: Lane3D, prop: Proposal) -> float:
    """Visibility-weighted mean pointwise (x, z) distance between a GT lane
    and a proposal sharing its y-samples."""
    vis = gt.visibility
    total = vis.sum()
    if total <= 0:
        raise AllInvisible("ground-truth lane has no visible points")
    d = np.sqrt((gt.x - prop.x) ** 2 + (gt.z - prop.z) ** 2)
    return float((vis * d).sum() / total)


def matching_cost(gt: Lane3D, prop: Proposal, cfg: LossConfig) -> float:
    """Combined cost: low when the proposal is near the lane and confident
    in the lane's class."""
    return float(-cfg.beta_cls * prop.class_probs[gt.category]
                 + cfg.beta_dis * matching_distance(gt, prop))


def solve_assignment(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-total-cost injective row-to-column assignment (rectangular)."""
    cost = np.asarray(cost, dtype=np.float64)
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist()))


def assign(gts: list[Lane3D], props: list[Proposal], cfg: LossConfig) -> Assignment:
    """Optimally match every ground-truth lane to a distinct proposal."""
    if not props:
        raise LengthMismatch("assignment needs at least one proposal")
    non_lane = props[0].class_probs.shape[0] - 1
    labels = np.full(len(props), non_lane, dtype=np.intp)
    if not gts:
        return Assignment(sigma={}, positives=[], labels=labels, non_lane_class=non_lane)
    cost = np.empty((len(gts), len(props)), dtype=np.float64)
    for i, gt in enumerate(gts):
        for j, p in enumerate(props):
            cost[i, j] = matching_cost(gt, p, cfg)
    pairs = solve_assignment(cost)
    sigma = {i: j for i, j in pairs}
    positives = [sigma[i] for i in sorted(sigma)]
    for i, j in sigma.items():
        labels[j] = gts[i].category
    return Assignment(sigma=sigma, positives=positives, labels=labels, non_lane_class=non_lane)


def classification_loss(props: list[Proposal], assignment: Assignment) -> float:
    """Negative log-likelihood of each proposal's assigned label.

    Probabilities below 1e-30 are clamped and reported through a
    :class:`ProbabilityUnderflow` warning rather than producing inf.
    """
    picked = np.array([p.class_probs[assignment.labels[j]] for j, p in enumerate(props)])
    low = picked < _PROB_FLOOR
    if np.any(low):
        warnings.warn(
            f"{int(low.sum())} assigned-class probabilities below {_PROB_FLOOR} were clamped",
            ProbabilityUnderflow,
            stacklevel=2,
        )
        picked = np.maximum(picked, _PROB_FLOOR)
    return float(-np.log(picked).sum())


@dataclass
class GradBundle:
    """Gradients with respect to every proposal's coordinates, (M, N) each."""

    d_x: np.ndarray
    d_z: np.ndarray
    d_vis: np.ndarray


def regression_loss(
    gts: list[Lane3D], props: list[Proposal], assignment: Assignment
) -> tuple[float, GradBundle]:
    """Visibility-masked L1 loss over assigned pairs plus its gradient.

    Invisible GT points contribute nothing to the coordinate terms; the
    visibility term always compares the full vectors.
    """
    n = props[0].num_points if props else 0
    d_x = np.zeros((len(props), n))
    d_z = np.zeros((len(props), n))
    d_vis = np.zeros((len(props), n))
    loss = 0.0
    for i in sorted(assignment.sigma):
        j = assignment.sigma[i]
        gt, p = gts[i], props[j]
        vis = gt.visibility
        ex = p.x - gt.x
        ez = p.z - gt.z
        ev = p.vis - gt.visibility
        loss += float(np.abs(vis * ex).sum() + np.abs(vis * ez).sum() + np.abs(ev).sum())
        d_x[j] += vis * np.sign(ex)
        d_z[j] += vis * np.sign(ez)
        d_vis[j] += np.sign(ev)
    return loss, GradBundle(d_x=d_x, d_z=d_z, d_vis=d_vis)


def ew_pair_loss(
    x_ref: np.ndarray, x_other: np.ndarray, y: np.ndarray, tau: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Equal-width loss for one ordered lane pair and its x-gradients.

    Widths are measured along the normals of the *other* lane: at each
    point the x-gap is scaled by the cosine of that lane's local heading,
    taken from its forward segment (the last point reuses the final
    segment).  The loss is the mean absolute deviation of the widths,
    gated to zero at or above ``tau`` so forks are exempt.

    Returns (loss, grad wrt x_ref, grad wrt x_other).
    """
    x_ref = np.asarray(x_ref, dtype=np.float64)
    x_other = np.asarray(x_other, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    dy = np.diff(y)
    if np.any(dy == 0.0):
        raise DegenerateSegment("repeated y-sample makes a lane direction undefined")
    dxo = np.diff(x_other)
    seg = np.minimum(np.arange(n), n - 2)  # forward segment; last point reuses it
    hyp2 = dy[seg] ** 2 + dxo[seg] ** 2
    cos = dy[seg] / np.sqrt(hyp2)
    gap = x_other - x_ref
    widths = np.abs(cos * gap)
    mean_w = widths.mean()
    dev = widths - mean_w
    delta_w = np.abs(dev).mean()

    g_ref = np.zeros(n)
    g_other = np.zeros(n)
    if delta_w >= tau:
        return 0.0, g_ref, g_other

    sign_dev = np.sign(dev)
    # d delta_w / d widths[k]; the mean subtraction couples all points.
    d_w = (sign_dev - sign_dev.mean()) / n
    # Through the gap (cos > 0 always, so sign(width term) == sign(gap)).
    d_gap = d_w * cos * np.sign(gap)
    g_other += d_gap
    g_ref -= d_gap
    # Through the cosine, which depends on the other lane's segment slope.
    d_cos = d_w * np.abs(gap)
    d_dxo = d_cos * (-dy[seg] * dxo[seg] / hyp2 ** 1.5)
    np.add.at(g_other, seg + 1, d_dxo)
    np.add.at(g_other, seg, -d_dxo)
    return float(delta_w), g_ref, g_other


def ew_loss(
    positives: list[Proposal], y: np.ndarray, cfg: LossConfig
) -> tuple[float, np.ndarray]:
    """Equal-width loss averaged over all ordered pairs of positives.

    Returns (loss, gradient wrt each positive's x, shaped (M_p, N)).
    Fewer than two positives give a zero loss by definition.
    """
    m = len(positives)
    n = y.shape[0] if m else 0
    grads = np.zeros((m, n))
    if m < 2:
        return 0.0, grads
    total = 0.0
    norm = 1.0 / (m * (m - 1))
    for j in range(m):
        for jp in range(m):
            if jp == j:
                continue
            pair, g_ref, g_other = ew_pair_loss(positives[j].x, positives[jp].x, y, cfg.tau)
            total += pair
            grads[j] += g_ref
            grads[jp] += g_other
    return total * norm, grads * norm


@dataclass
class LossBreakdown:
    cls: float
    reg: float
    ew: float
    total: float

    def to_json_dict(self) -> dict:
        return {"cls": self.cls, "reg": self.reg, "ew": self.ew, "total": self.total}


def total_loss(
    gts: list[Lane3D],
    props: list[Proposal],
    assignment: Assignment,
    cfg: LossConfig,
    y: np.ndarray,
) -> tuple[LossBreakdown, GradBundle]:
    """Coefficient-weighted sum of the three losses with merged gradients."""
    l_cls = classification_loss(props, assignment)
    l_reg, reg_grad = regression_loss(gts, props, assignment)
    positives = [props[j] for j in assignment.positives]
    l_ew, ew_grads = ew_loss(positives, np.asarray(y, dtype=np.float64), cfg)

    d_x = cfg.lambda_reg * reg_grad.d_x
    d_z = cfg.lambda_reg * reg_grad.d_z
    d_vis = cfg.lambda_reg * reg_grad.d_vis
    for row, j in enumerate(assignment.positives):
        d_x[j] += cfg.lambda_ew * ew_grads[row]

    total = cfg.lambda_cls * l_cls + cfg.lambda_reg * l_reg + cfg.lambda_ew * l_ew
    return (
        LossBreakdown(cls=l_cls, reg=l_reg, ew=l_ew, total=total),
        GradBundle(d_x=d_x, d_z=d_z, d_vis=d_vis),
    )
