"""On-disk dataset format: PNG frames plus a transforms.json index.

The index follows the synthetic-blender convention: a top-level
``camera_angle_x`` (horizontal field of view in radians) and a ``frames``
list of ``{"file_path": "./r_000", "transform_matrix": 4x4}`` entries with
camera-to-world matrices in row-major order.  ``near``/``far`` ride along
as extra keys; standard readers ignore them.
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from .render import Camera, RenderConfig, render_image
from .se3 import Pose
from .trainer import PosedDataset

DEFAULT_NEAR = 0.4
DEFAULT_FAR = 2.4


def write_png(path, image: np.ndarray) -> None:
    """Store a float [0,1] image as 8-bit sRGB: round(255 * clamped)."""
    arr = np.asarray(image, dtype=float)
    quantized = np.round(255.0 * np.clip(arr, 0.0, 1.0)).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def save_pose_json(path, pose: Pose) -> None:
    with open(path, "w") as fh:
        json.dump({"transform_matrix": pose.matrix().tolist()}, fh, indent=1)


def load_pose_json(path) -> Pose:
    with open(path) as fh:
        data = json.load(fh)
    return Pose.from_matrix(np.asarray(data["transform_matrix"], dtype=float))


def save_camera_json(path, camera: Camera) -> None:
    with open(path, "w") as fh:
        json.dump(
            {
                "width": camera.width,
                "height": camera.height,
                "focal": camera.focal,
                "cx": camera.cx,
                "cy": camera.cy,
                "near": camera.near,
                "far": camera.far,
            },
            fh,
            indent=1,
        )


def load_camera_json(path) -> Camera:
    with open(path) as fh:
        d = json.load(fh)
    return Camera(
        width=d["width"], height=d["height"], focal=d["focal"],
        near=d["near"], far=d["far"], cx=d.get("cx"), cy=d.get("cy"),
    )


def camera_angle_x(camera: Camera) -> float:
    return 2.0 * np.arctan(0.5 * camera.width / camera.focal)


def generate_dataset(field, camera: Camera, poses, out_dir,
                     render_config: RenderConfig | None = None,
                     rng=None, threads: int = 1) -> str:
    """Render one PNG per pose into out_dir and write transforms.json."""
    render_config = render_config or RenderConfig()
    os.makedirs(out_dir, exist_ok=True)
    frames = []
    for i, pose in enumerate(poses):
        name = f"r_{i:03d}"
        image = render_image(field, camera, pose, render_config, rng=rng, threads=threads)
        write_png(os.path.join(out_dir, name + ".png"), image)
        frames.append(
            {"file_path": f"./{name}", "transform_matrix": pose.matrix().tolist()}
        )
    index = {
        "camera_angle_x": camera_angle_x(camera),
        "near": camera.near,
        "far": camera.far,
        "frames": frames,
    }
    index_path = os.path.join(out_dir, "transforms.json")
    with open(index_path, "w") as fh:
        json.dump(index, fh, indent=1)
    return index_path


def load_dataset(data_dir) -> PosedDataset:
    """Read a transforms.json directory back into memory."""
    index_path = os.path.join(data_dir, "transforms.json")
    try:
        with open(index_path) as fh:
            index = json.load(fh)
    except OSError as err:
        raise OSError(f"cannot read dataset index {index_path}: {err}") from err
    images, poses = [], []
    for frame in index["frames"]:
        rel = frame["file_path"]
        if not rel.endswith(".png"):
            rel = rel + ".png"
        images.append(read_png(os.path.join(data_dir, rel)))
        poses.append(Pose.from_matrix(np.asarray(frame["transform_matrix"], dtype=float)))
    if not images:
        raise ValueError(f"{index_path}: dataset has no frames")
    height, width = images[0].shape[:2]
    focal = 0.5 * width / np.tan(0.5 * float(index["camera_angle_x"]))
    camera = Camera(
        width=width, height=height, focal=focal,
        near=float(index.get("near", DEFAULT_NEAR)),
        far=float(index.get("far", DEFAULT_FAR)),
    )
    return PosedDataset(camera=camera, images=images, poses=poses)
