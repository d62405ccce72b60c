"""Finite-difference verification of the analytic loss gradients.

Random small instances are drawn away from the kinks of the |.| terms and
the fork-exemption gate, then every coordinate of every proposal is
perturbed centrally and compared against the analytic gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .head import Proposal
from .lanes import Lane3D
from .losses import Assignment, LossConfig, ew_loss, ew_pair_loss, regression_loss

KINK_MARGIN = 1e-3
FD_STEP = 1e-6
TOLERANCE = 1e-5


@dataclass
class GradCheckResult:
    trials: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_json_dict(self) -> dict:
        return {
            "trials": self.trials,
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())


def _central_difference(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.shape[0]):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * h)
    return grad


def _instance_clear_of_kinks(gts, props, y, tau):
    for gt, p in zip(gts, props):
        on = gt.visibility > 0
        if np.any(on):
            if np.abs(p.x - gt.x)[on].min() < KINK_MARGIN:
                return False
            if np.abs(p.z - gt.z)[on].min() < KINK_MARGIN:
                return False
        if np.abs(p.vis - gt.visibility).min() < KINK_MARGIN:
            return False
    for j in range(len(props)):
        for jp in range(len(props)):
            if j == jp:
                continue
            x_ref, x_other = props[j].x, props[jp].x
            gap = x_other - x_ref
            if np.abs(gap).min() < KINK_MARGIN:
                return False
            dxo = np.diff(x_other)
            dy = np.diff(y)
            seg = np.minimum(np.arange(y.shape[0]), y.shape[0] - 2)
            cos = dy[seg] / np.sqrt(dy[seg] ** 2 + dxo[seg] ** 2)
            widths = np.abs(cos * gap)
            dev = widths - widths.mean()
            if np.abs(dev).min() < KINK_MARGIN:
                return False
            if abs(np.abs(dev).mean() - tau) < KINK_MARGIN:
                return False
    return True


def _draw_instance(rng: np.random.Generator, tau: float):
    """A near-parallel lane bundle with jitter, regenerated until every
    |.| argument and the gate are at least KINK_MARGIN from zero."""
    for _ in range(200):
        n = int(rng.integers(2, 6))
        m = int(rng.integers(2, 5))
        y = 2.0 + np.cumsum(rng.uniform(1.0, 3.0, size=n))
        base = rng.uniform(-0.3, 0.3) * y + rng.uniform(-2, 2)
        offsets = np.cumsum(rng.uniform(2.0, 4.0, size=m))
        gts, props = [], []
        for j in range(m):
            gx = base + offsets[j]
            gz = rng.uniform(-0.5, 0.5) + rng.uniform(-0.01, 0.01) * y
            gvis = (rng.random(n) < 0.8).astype(np.float64)
            jitter = rng.uniform(0.005, 0.03, size=n) * rng.choice([-1.0, 1.0], size=n)
            jitter_z = rng.uniform(0.005, 0.03, size=n) * rng.choice([-1.0, 1.0], size=n)
            gts.append(Lane3D(x=gx, y=y, z=gz, visibility=gvis, category=0))
            props.append(
                Proposal(
                    class_probs=np.array([0.7, 0.3]),
                    x=gx + jitter,
                    z=gz + jitter_z,
                    vis=rng.uniform(0.1, 0.9, size=n),
                )
            )
        if _instance_clear_of_kinks(gts, props, y, tau):
            return gts, props, y
    raise RuntimeError("could not draw a kink-free instance")


def run_grad_check(trials: int, seed: int, cfg: LossConfig | None = None) -> GradCheckResult:
    """Check ew_loss and regression_loss gradients on random instances."""
    cfg = cfg or LossConfig()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        gts, props, y = _draw_instance(rng, cfg.tau)
        m = len(props)
        assignment = Assignment(
            sigma={i: i for i in range(m)},
            positives=list(range(m)),
            labels=np.zeros(m, dtype=np.intp),
            non_lane_class=1,
        )

        _, reg_grad = regression_loss(gts, props, assignment)
        reg_value = lambda: regression_loss(gts, props, assignment)[0]
        for p, analytic_rows in (
            ("x", reg_grad.d_x),
            ("z", reg_grad.d_z),
            ("vis", reg_grad.d_vis),
        ):
            for j, prop in enumerate(props):
                arr = getattr(prop, p)
                numeric = _central_difference(reg_value, arr)
                worst = max(worst, _rel_error(analytic_rows[j], numeric))

        _, ew_grads = ew_loss(props, y, cfg)
        ew_value = lambda: ew_loss(props, y, cfg)[0]
        for j, prop in enumerate(props):
            numeric = _central_difference(ew_value, prop.x)
            worst = max(worst, _rel_error(ew_grads[j], numeric))
    return GradCheckResult(trials=trials, max_rel_error=worst, tolerance=TOLERANCE)


__all__ = [
    "FD_STEP",
    "GradCheckResult",
    "KINK_MARGIN",
    "TOLERANCE",
    "ew_pair_loss",
    "run_grad_check",
]
