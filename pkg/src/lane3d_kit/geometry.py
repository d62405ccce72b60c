"""Coordinate systems, rigid transforms, and pinhole projection.

Conventions used throughout the package:

* Ground frame: origin on the road surface directly below the camera
  center, x right, y forward, z up, units in meters.
* Camera frame: right-handed, x right, y down, z forward (optical axis).
* Feature grid: u indexes width (columns), v indexes height (rows), cell
  centers sit at integer coordinates.

All matrices are row-major float64; projection feeds metric code that is
tested at 1e-9, so nothing here ever drops to 32-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DepthNonPositive, InvalidRig, MissingLidarExtrinsics

#: Depth below which a point counts as being on/behind the camera plane.
MIN_DEPTH = 1e-6

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class GroundPoint:
    """A point in the ground frame (meters)."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y) and np.isfinite(self.z)):
            raise ValueError(f"ground point has non-finite component: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass(frozen=True)
class FeaturePoint:
    """A projected point in feature-grid coordinates plus its camera depth.

    The depth is recorded even when (u, v) falls outside the grid; whether
    the point is usable is decided by the sampler, not here.
    """

    u: float
    v: float
    depth: float


@dataclass
class CameraRig:
    """Calibrated camera (and optional LiDAR) rig.

    ``K`` is the 3x3 pinhole intrinsics matrix in pixels, ``T_gc`` the 3x4
    ground-to-camera transform (rotation | translation), ``T_gl`` the
    optional 3x4 ground-to-LiDAR transform.  ``image_size`` and
    ``feature_size`` are (height, width) pairs; the feature grid must tile
    the image exactly (the usual ratio is 1/8).
    """

    K: np.ndarray
    T_gc: np.ndarray
    image_size: tuple[int, int]
    feature_size: tuple[int, int]
    T_gl: np.ndarray | None = None
    _P: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.T_gc = np.asarray(self.T_gc, dtype=np.float64)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        self.feature_size = (int(self.feature_size[0]), int(self.feature_size[1]))
        if self.T_gl is not None:
            self.T_gl = np.asarray(self.T_gl, dtype=np.float64)
            if self.T_gl.shape != (3, 4):
                raise InvalidRig(f"T_gl must be 3x4, got {self.T_gl.shape}")
        if self.K.shape != (3, 3):
            raise InvalidRig(f"K must be 3x3, got {self.K.shape}")
        if self.T_gc.shape != (3, 4):
            raise InvalidRig(f"T_gc must be 3x4, got {self.T_gc.shape}")
        if self.K[2, 2] != 1.0 or any(self.K[i, j] != 0.0 for i, j in ((1, 0), (2, 0), (2, 1))):
            raise InvalidRig("K is not in upper-triangular pinhole form")
        R = self.T_gc[:, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=_ORTHO_TOL):
            raise InvalidRig("rotation block of T_gc is not orthonormal")
        hi, wi = self.image_size
        hf, wf = self.feature_size
        if hi % hf != 0 or wi % wf != 0:
            raise InvalidRig(
                f"feature size {self.feature_size} does not divide image size {self.image_size}"
            )
        self._P = self.K @ self.T_gc

    @property
    def scale_u(self) -> float:
        """Image-to-feature scale along width (W_F / W_I)."""
        return self.feature_size[1] / self.image_size[1]

    @property
    def scale_v(self) -> float:
        """Image-to-feature scale along height (H_F / H_I)."""
        return self.feature_size[0] / self.image_size[0]

    def to_json_dict(self) -> dict:
        return {
            "K": self.K.tolist(),
            "T_gc": self.T_gc.tolist(),
            "T_gl": None if self.T_gl is None else self.T_gl.tolist(),
            "image_size": list(self.image_size),
            "feature_size": list(self.feature_size),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CameraRig":
        return cls(
            K=np.array(d["K"], dtype=np.float64),
            T_gc=np.array(d["T_gc"], dtype=np.float64),
            T_gl=None if d.get("T_gl") is None else np.array(d["T_gl"], dtype=np.float64),
            image_size=tuple(d["image_size"]),
            feature_size=tuple(d["feature_size"]),
        )


def project_to_feature(p: GroundPoint, rig: CameraRig) -> FeaturePoint:
    """Project a ground point into feature-grid coordinates.

    Applies the pinhole projection K @ T_gc to the homogeneous point and
    scales the pixel result down to the feature grid.  Raises
    :class:`DepthNonPositive` when the point is at or behind the camera
    plane; the caller decides whether that makes a sample invalid.
    """
    hom = rig._P @ np.array([p.x, p.y, p.z, 1.0])
    d = hom[2]
    if d <= MIN_DEPTH:
        raise DepthNonPositive(f"depth {d} <= {MIN_DEPTH} for point {p}")
    return FeaturePoint(
        u=rig.scale_u * hom[0] / d,
        v=rig.scale_v * hom[1] / d,
        depth=d,
    )


def project_points_to_feature(
    xyz: np.ndarray, rig: CameraRig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized form of :func:`project_to_feature` over an (N, 3) array.

    Returns (uv, depth, in_front) where points failing the depth test get
    in_front=False and their uv is left at 0 rather than raising.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    hom = xyz @ rig._P[:, :3].T + rig._P[:, 3]
    depth = hom[:, 2]
    in_front = depth > MIN_DEPTH
    safe = np.where(in_front, depth, 1.0)
    uv = np.zeros((xyz.shape[0], 2), dtype=np.float64)
    uv[:, 0] = np.where(in_front, rig.scale_u * hom[:, 0] / safe, 0.0)
    uv[:, 1] = np.where(in_front, rig.scale_v * hom[:, 1] / safe, 0.0)
    return uv, depth, in_front


def project_to_lidar(p: GroundPoint, rig: CameraRig) -> GroundPoint:
    """Transform a ground point into the LiDAR frame via T_gl."""
    if rig.T_gl is None:
        raise MissingLidarExtrinsics("rig has no ground-to-LiDAR transform")
    out = rig.T_gl @ np.array([p.x, p.y, p.z, 1.0])
    return GroundPoint(out[0], out[1], out[2])


def project_points_to_lidar(xyz: np.ndarray, rig: CameraRig) -> np.ndarray:
    """Vectorized form of :func:`project_to_lidar` over an (N, 3) array."""
    if rig.T_gl is None:
        raise MissingLidarExtrinsics("rig has no ground-to-LiDAR transform")
    xyz = np.asarray(xyz, dtype=np.float64)
    return xyz @ rig.T_gl[:, :3].T + rig.T_gl[:, 3]


def back_project(fp: FeaturePoint, rig: CameraRig) -> GroundPoint:
    """Invert :func:`project_to_feature` given the recorded depth.

    The projection matrix restricted to the rotation part is K @ R, which
    is invertible for any valid rig, so the ground point is unique.
    """
    if fp.depth <= MIN_DEPTH:
        raise DepthNonPositive(f"cannot back-project depth {fp.depth}")
    rhs = np.array(
        [fp.u / rig.scale_u * fp.depth, fp.v / rig.scale_v * fp.depth, fp.depth]
    )
    p = np.linalg.solve(rig._P[:, :3], rhs - rig._P[:, 3])
    return GroundPoint(p[0], p[1], p[2])
