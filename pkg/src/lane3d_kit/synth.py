"""Synthetic scenes: ground-truth lanes, rigs, rasterized features, and
perturbed predictions.

This is the desk-scale stand-in for trained models and real datasets.
Scenes are built from a shared centerline polynomial so that lanes are
laterally offset copies of each other: with constant or linear curvature
their pairwise widths are exactly constant, which pins the equal-width
loss ground truth at zero.  A fork can be injected to exercise the
threshold-exemption path.  Everything is a pure function of (spec, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import DatasetProfile
from .geometry import CameraRig, project_points_to_feature
from .head import Proposal
from .lanes import Lane3D
from .sampling import FeatureMap, FeatureVolume


@dataclass
class SceneSpec:
    """Parameters of one synthetic road scene.

    ``curvature`` and ``slope`` are polynomial coefficients in ascending
    order for x(y) and z(y).  ``fork_lane``/``fork_coefficient`` bend one
    lane's curvature to create a non-parallel pair.
    """

    n_lanes: int = 2
    spacing: float = 3.5
    curvature: tuple = (0.0,)
    slope: tuple = (0.0,)
    camera_height: float = 1.5
    camera_pitch: float = 0.0
    seed: int = 0
    # Wide enough that the default two-lane scene is fully in frustum from
    # the first y-sample onward.
    focal: float = 330.0
    image_size: tuple[int, int] = (360, 480)
    feature_stride: int = 8
    fork_lane: int | None = None
    fork_coefficient: float = 0.0

    def __post_init__(self):
        if self.n_lanes < 1:
            raise ValueError("n_lanes must be >= 1")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        self.curvature = tuple(float(c) for c in self.curvature)
        self.slope = tuple(float(c) for c in self.slope)

    def to_json_dict(self) -> dict:
        return {
            "n_lanes": self.n_lanes,
            "spacing": self.spacing,
            "curvature": list(self.curvature),
            "slope": list(self.slope),
            "camera_height": self.camera_height,
            "camera_pitch": self.camera_pitch,
            "seed": self.seed,
            "focal": self.focal,
            "image_size": list(self.image_size),
            "feature_stride": self.feature_stride,
            "fork_lane": self.fork_lane,
            "fork_coefficient": self.fork_coefficient,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SceneSpec":
        kwargs = dict(d)
        if "curvature" in kwargs:
            kwargs["curvature"] = tuple(kwargs["curvature"])
        if "slope" in kwargs:
            kwargs["slope"] = tuple(kwargs["slope"])
        if "image_size" in kwargs:
            kwargs["image_size"] = tuple(kwargs["image_size"])
        return cls(**kwargs)


@dataclass
class NoiseSpec:
    """Deterministic perturbation applied when faking predictions."""

    lateral_offset: float = 0.0
    z_offset: float = 0.0
    score: float = 1.0
    drop_rate: float = 0.0

    @classmethod
    def from_json_dict(cls, d: dict) -> "NoiseSpec":
        return cls(**{k: float(v) for k, v in d.items()})


def build_rig(spec: SceneSpec, with_lidar: bool = False) -> CameraRig:
    """Camera rig for a scene: height above the origin, optional down-pitch.

    The base ground-to-camera rotation maps x right, y forward, z up onto
    the camera's x right, y down, z forward; pitch rotates about the
    camera x-axis (positive tilts the view down).
    """
    h_i, w_i = spec.image_size
    base = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    a = spec.camera_pitch
    pitch = np.array(
        [[1.0, 0.0, 0.0], [0.0, math.cos(a), -math.sin(a)], [0.0, math.sin(a), math.cos(a)]]
    )
    rot = pitch @ base
    center = np.array([0.0, 0.0, spec.camera_height])
    t = -rot @ center
    k = np.array(
        [[spec.focal, 0.0, w_i / 2.0], [0.0, spec.focal, h_i / 2.0], [0.0, 0.0, 1.0]]
    )
    t_gl = np.hstack([np.eye(3), np.zeros((3, 1))]) if with_lidar else None
    return CameraRig(
        K=k,
        T_gc=np.hstack([rot, t[:, None]]),
        T_gl=t_gl,
        image_size=(h_i, w_i),
        feature_size=(h_i // spec.feature_stride, w_i // spec.feature_stride),
    )


def _polyval(coeffs: tuple, y: np.ndarray) -> np.ndarray:
    out = np.zeros_like(y)
    for power, c in enumerate(coeffs):
        out += c * y ** power
    return out


def generate_scene(
    spec: SceneSpec, profile: DatasetProfile, with_lidar: bool = False
) -> tuple[list[Lane3D], CameraRig]:
    """Build ground-truth lanes and the rig for a scene.

    Lanes share the curvature and slope polynomials and sit ``spacing``
    apart, centered on the ego axis.  Point visibility is the frustum test
    against the rig's feature grid.
    """
    rig = build_rig(spec, with_lidar=with_lidar)
    y = profile.y_samples
    z = _polyval(spec.slope, y)
    center = _polyval(spec.curvature, y)
    h_i, w_i = rig.image_size
    lanes = []
    for i in range(spec.n_lanes):
        offset = (i - (spec.n_lanes - 1) / 2.0) * spec.spacing
        x = center + offset
        if spec.fork_lane is not None and i == spec.fork_lane:
            x = x + spec.fork_coefficient * (y - y[0]) ** 2
        pts = np.stack([x, y, z], axis=1)
        uv, _, in_front = project_points_to_feature(pts, rig)
        # Visibility is the image-frustum test; whether a projected point is
        # also bilinearly samplable is the feature grid's concern.
        u_pix = uv[:, 0] / rig.scale_u
        v_pix = uv[:, 1] / rig.scale_v
        vis = (
            in_front
            & (u_pix >= 0.0) & (u_pix <= w_i - 1.0)
            & (v_pix >= 0.0) & (v_pix <= h_i - 1.0)
        )
        lanes.append(
            Lane3D(
                x=x,
                y=y.copy(),
                z=z.copy(),
                visibility=vis.astype(np.float64),
                category=i % profile.num_categories,
            )
        )
    return lanes, rig


def rasterize_features(
    gts: list[Lane3D], rig: CameraRig, dims: tuple[int, int, int], sigma: float, level: int = 5
) -> FeatureMap:
    """Splat Gaussian bumps (peak 1.0, width sigma in cells) at the
    projected visible lane points into channel 0 of a feature map.

    Bumps combine by maximum so the peak stays exactly 1 where lanes
    overlap; remaining channels are zero.
    """
    h, w, c = dims
    data = np.zeros((h, w, c), dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)
    for lane in gts:
        mask = lane.visible_mask
        if not np.any(mask):
            continue
        uv, _, in_front = project_points_to_feature(lane.points[mask], rig)
        for (u, v), ok in zip(uv, in_front):
            if not ok:
                continue
            bump = np.exp(
                -((cols[None, :] - u) ** 2 + (rows[:, None] - v) ** 2) / (2.0 * sigma ** 2)
            )
            np.maximum(data[:, :, 0], bump, out=data[:, :, 0])
    return FeatureMap(data=data, level=level)


def rasterize_volume(
    gts: list[Lane3D],
    dims: tuple[int, int, int, int],
    extent: np.ndarray,
    sigma_cells: float = 1.0,
) -> FeatureVolume:
    """Voxel-grid analogue of :func:`rasterize_features` for fusion tests.

    Visible lane points splat Gaussian bumps into channel 0 of the volume;
    the extent gives first/last cell-center positions per axis (x, y, z).
    """
    d, h, w, c = dims
    extent = np.asarray(extent, dtype=np.float64)
    data = np.zeros((d, h, w, c), dtype=np.float64)
    axes = []
    for count, (lo, hi) in zip((w, h, d), extent):
        axes.append(np.linspace(lo, hi, count) if count > 1 else np.array([(lo + hi) / 2.0]))
    xs, ys, zs = axes
    steps = [
        (hi - lo) / (count - 1) if count > 1 else (hi - lo)
        for count, (lo, hi) in zip((w, h, d), extent)
    ]
    for lane in gts:
        mask = lane.visible_mask
        for px, py, pz in lane.points[mask]:
            fx = (xs - px) / steps[0]
            fy = (ys - py) / steps[1]
            fz = (zs - pz) / steps[2]
            bump = np.exp(
                -(fz[:, None, None] ** 2 + fy[None, :, None] ** 2 + fx[None, None, :] ** 2)
                / (2.0 * sigma_cells ** 2)
            )
            np.maximum(data[:, :, :, 0], bump, out=data[:, :, :, 0])
    return FeatureVolume(data=data, extent=extent)


def perturb_predictions(
    gts: list[Lane3D], noise: NoiseSpec, seed: int, num_categories: int
) -> list[Proposal]:
    """Copy ground truth into proposals with deterministic offsets.

    The class distribution puts ``noise.score`` on the GT category and the
    remainder on the non-lane slot, so the proposal's score equals the
    requested value; lanes are dropped independently at ``drop_rate``.
    """
    rng = np.random.default_rng(seed)
    out = []
    for lane in gts:
        dropped = rng.random() < noise.drop_rate
        if dropped:
            continue
        probs = np.zeros(num_categories + 1)
        probs[lane.category] = noise.score
        probs[num_categories] = 1.0 - noise.score
        out.append(
            Proposal(
                class_probs=probs,
                x=lane.x + noise.lateral_offset,
                z=lane.z + noise.z_offset,
                vis=lane.visibility.copy(),
            )
        )
    return out
