"""Lane JSON files: frames with a rig, lanes, and optional tags.

Document shape::

    {"frames": [{"id": "...", "camera": {...} | null,
                 "lanes": [{"category": 2, "score": 0.9,
                            "points": [[x, y, z], ...],
                            "visibility": [1, 1, 0, ...],
                            "class_probs": [...]}],   # proposals only
                 "tags": ["curve"]}]}

``score`` is absent on ground truth; ``class_probs`` is written by the
forward command so losses can be recomputed from disk.  Validation errors
carry a JSON-pointer-style location.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FileFormatError
from .geometry import CameraRig
from .lanes import Lane3D


@dataclass
class Frame:
    id: str
    camera: CameraRig | None
    lanes: list[Lane3D]
    tags: tuple[str, ...] = ()


def _lane_to_dict(lane: Lane3D) -> dict:
    d = {
        "category": int(lane.category),
        "points": lane.points.tolist(),
        "visibility": lane.visibility.tolist(),
    }
    if lane.score is not None:
        d["score"] = float(lane.score)
    if lane.class_probs is not None:
        d["class_probs"] = lane.class_probs.tolist()
    return d


def _lane_from_dict(d: dict, path, ptr: str) -> Lane3D:
    for key in ("category", "points", "visibility"):
        if key not in d:
            raise FileFormatError(path, f"{ptr}/{key}", "missing field")
    points = np.asarray(d["points"], dtype=np.float64)
    vis = np.asarray(d["visibility"], dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise FileFormatError(path, f"{ptr}/points", "expected an array of [x, y, z] triples")
    if vis.shape[0] != points.shape[0]:
        raise FileFormatError(
            path, f"{ptr}/visibility",
            f"length {vis.shape[0]} does not match {points.shape[0]} points",
        )
    if points.shape[0] >= 2 and not np.all(np.diff(points[:, 1]) > 0):
        raise FileFormatError(path, f"{ptr}/points", "y must be strictly increasing")
    probs = d.get("class_probs")
    return Lane3D(
        x=points[:, 0],
        y=points[:, 1],
        z=points[:, 2],
        visibility=vis,
        category=int(d["category"]),
        score=None if d.get("score") is None else float(d["score"]),
        class_probs=None if probs is None else np.asarray(probs, dtype=np.float64),
    )


def write_lane_file(path, frames: list[Frame]) -> None:
    doc = {
        "frames": [
            {
                "id": f.id,
                "camera": None if f.camera is None else f.camera.to_json_dict(),
                "lanes": [_lane_to_dict(lane) for lane in f.lanes],
                **({"tags": list(f.tags)} if f.tags else {}),
            }
            for f in frames
        ]
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_lane_file(path) -> list[Frame]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FileFormatError(path, f"offset {e.pos}", f"invalid JSON: {e.msg}") from e
    if not isinstance(doc, dict) or "frames" not in doc:
        raise FileFormatError(path, "/frames", "missing field")
    frames = []
    for i, fd in enumerate(doc["frames"]):
        ptr = f"/frames/{i}"
        if "id" not in fd or "lanes" not in fd:
            raise FileFormatError(path, ptr, "frame needs id and lanes")
        cam = fd.get("camera")
        try:
            rig = None if cam is None else CameraRig.from_json_dict(cam)
        except (KeyError, ValueError, TypeError) as e:
            raise FileFormatError(path, f"{ptr}/camera", str(e)) from e
        lanes = [
            _lane_from_dict(ld, path, f"{ptr}/lanes/{j}") for j, ld in enumerate(fd["lanes"])
        ]
        frames.append(
            Frame(id=str(fd["id"]), camera=rig, lanes=lanes, tags=tuple(fd.get("tags", ())))
        )
    return frames
