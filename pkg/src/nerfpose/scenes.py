"""Built-in analytic scenes, camera rigs, and JSON scene descriptions.

The bundled "trio" scene is the desk-scale workhorse: three colored blobs
of unequal size placed asymmetrically around the origin, so every view has
color edges for the interest-point detector and the pose is observable
from any direction.  World units are arbitrary ("scene units"); cameras
orbit at radius ~1.3 looking at the origin with z up.
"""

from __future__ import annotations

import numpy as np

from .fields import AnalyticField, Box, MLPField, Sphere
from .render import Camera
from .se3 import Pose

WORLD_UP = np.array([0.0, 0.0, 1.0])


def trio_scene() -> AnalyticField:
    """Three smooth primitives with distinct colors; no symmetries."""
    return AnalyticField(
        [
            Sphere(center=np.array([0.22, 0.05, 0.02]), radius=0.16, width=0.06,
                   density=18.0, albedo=np.array([0.85, 0.15, 0.12])),
            Box(center=np.array([-0.18, 0.12, -0.06]), half_extents=np.array([0.1, 0.16, 0.09]),
                width=0.06, density=14.0, albedo=np.array([0.12, 0.65, 0.2])),
            Sphere(center=np.array([-0.02, -0.22, 0.1]), radius=0.11, width=0.05,
                   density=20.0, albedo=np.array([0.15, 0.25, 0.9]), view_tint=0.15),
        ]
    )


def desk_scene() -> AnalyticField:
    """The trio over a broad ground slab.

    The slab pins down scene orientation and depth: floating blobs alone
    leave a near-ambiguity between translating away and rotating, which
    occasionally strands pose optimization in a distant minimum.
    """
    return AnalyticField(
        [
            Sphere(center=np.array([0.22, 0.05, 0.02]), radius=0.16, width=0.08,
                   density=18.0, albedo=np.array([0.85, 0.15, 0.12])),
            Box(center=np.array([-0.18, 0.12, -0.06]), half_extents=np.array([0.1, 0.16, 0.09]),
                width=0.08, density=14.0, albedo=np.array([0.12, 0.65, 0.2])),
            Sphere(center=np.array([-0.02, -0.22, 0.1]), radius=0.11, width=0.06,
                   density=20.0, albedo=np.array([0.15, 0.25, 0.9]), view_tint=0.15),
            Box(center=np.array([0.0, 0.0, -0.3]), half_extents=np.array([0.42, 0.42, 0.06]),
                width=0.07, density=16.0, albedo=np.array([0.75, 0.6, 0.25])),
        ]
    )


BUILTIN_SCENES = {"trio": trio_scene, "desk": desk_scene}


def default_camera(size: int = 100) -> Camera:
    """Square camera with a ~61 degree field of view at any resolution."""
    return Camera(width=size, height=size, focal=0.85 * size, near=0.4, far=2.4)


def look_at(eye: np.ndarray, target=None, up=WORLD_UP) -> Pose:
    """Camera-to-world pose with -z aimed from eye toward target."""
    eye = np.asarray(eye, dtype=float)
    target = np.zeros(3) if target is None else np.asarray(target, dtype=float)
    backward = eye - target
    norm = np.linalg.norm(backward)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    z = backward / norm
    x = np.cross(up, z)
    xn = np.linalg.norm(x)
    if xn < 1e-9:
        raise ValueError("view direction is parallel to the up vector")
    x = x / xn
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def hemisphere_poses(n: int, radius: float = 1.3,
                     elevation_range_deg=(20.0, 55.0)) -> list[Pose]:
    """n cameras on a golden-angle spiral over an upper-hemisphere band,
    all looking at the origin from the same radius.

    The spiral keeps any stride-k subset of the views spread over the
    whole azimuth range and elevation band, so train/eval splits taken
    by index never collapse onto one side of the scene.
    """
    if n < 1:
        raise ValueError("need at least one view")
    golden = np.pi * (3.0 - np.sqrt(5.0))
    s_lo, s_hi = (np.sin(np.radians(e)) for e in elevation_range_deg)
    poses = []
    for i in range(n):
        elev = np.arcsin(s_lo + (s_hi - s_lo) * ((i + 0.5) / n))
        azim = i * golden
        eye = radius * np.array(
            [np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)]
        )
        poses.append(look_at(eye))
    return poses


def scene_to_json(field: AnalyticField) -> dict:
    prims = []
    for p in field.primitives:
        if isinstance(p, Sphere):
            prims.append(
                {
                    "kind": "sphere",
                    "center": list(map(float, p.center)),
                    "radius": float(p.radius),
                    "width": float(p.width),
                    "density": float(p.density),
                    "albedo": list(map(float, p.albedo)),
                    "view_tint": float(p.view_tint),
                }
            )
        elif isinstance(p, Box):
            prims.append(
                {
                    "kind": "box",
                    "center": list(map(float, p.center)),
                    "half_extents": list(map(float, p.half_extents)),
                    "width": float(p.width),
                    "density": float(p.density),
                    "albedo": list(map(float, p.albedo)),
                    "view_tint": float(p.view_tint),
                }
            )
        else:
            raise TypeError(f"unknown primitive {type(p).__name__}")
    return {"type": "analytic", "primitives": prims}


def scene_from_json(spec: dict) -> AnalyticField:
    if spec.get("type") != "analytic":
        raise ValueError("scene spec must have type 'analytic'")
    prims = []
    for p in spec.get("primitives", []):
        kind = p.get("kind")
        common = dict(
            center=np.asarray(p["center"], dtype=float),
            width=float(p["width"]),
            density=float(p["density"]),
            albedo=np.asarray(p["albedo"], dtype=float),
            view_tint=float(p.get("view_tint", 0.0)),
        )
        if kind == "sphere":
            prims.append(Sphere(radius=float(p["radius"]), **common))
        elif kind == "box":
            prims.append(Box(half_extents=np.asarray(p["half_extents"], dtype=float), **common))
        else:
            raise ValueError(f"unknown primitive kind {kind!r}")
    return AnalyticField(prims)


def resolve_scene(name_or_path: str):
    """Builtin scene name, analytic-scene JSON path, or trained field file."""
    import json
    import os

    if name_or_path in BUILTIN_SCENES:
        return BUILTIN_SCENES[name_or_path]()
    if not os.path.exists(name_or_path):
        raise FileNotFoundError(f"scene {name_or_path!r}: not a builtin name or a file")
    if name_or_path.endswith(".json"):
        with open(name_or_path) as fh:
            return scene_from_json(json.load(fh))
    return MLPField.load(name_or_path)
