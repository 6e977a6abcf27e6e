"""On-disk training dataset layout.

::

    dataset/cameras.json            [{fx, fy, cx, cy, width, height, pose: 16 floats}, ...]
    dataset/rgb/frame_0000.ppm
    dataset/feat/frame_0000.featf1  H' x W' x C embeddings
    dataset/aff/frame_0000.featf1   H x W x 1 affordance in [0, 1]
    dataset/seed_points.ply

``pose`` is the row-major 4x4 world-to-camera matrix.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .codec import FeatureImage
from .imageio import read_featf1, read_ppm, write_featf1, write_ppm
from .scene import CameraModel, export_ply, read_ply
from .trainer import Frame, TrainingDataset


class DatasetError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("dataset rejected:\n  " + "\n  ".join(self.problems))


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def camera_to_dict(cam: CameraModel) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": cam.width,
            "height": cam.height, "pose": [float(v) for v in cam.world_to_cam.ravel()]}


def camera_from_dict(d: dict) -> CameraModel:
    return CameraModel.from_matrix(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"], d["pose"])


def load_cameras(path) -> list[CameraModel]:
    return [camera_from_dict(d) for d in json.loads(Path(path).read_text())]


def save_cameras(path, cams) -> None:
    Path(path).write_text(json.dumps([camera_to_dict(c) for c in cams], indent=1))


def ingest_dataset(root, require_features: bool = True) -> TrainingDataset:
    """Load and validate a dataset directory; every problem found is reported before aborting.

    Per-file sha256 checksums are stored on the returned dataset's ``checksums``.
    """
    root = Path(root)
    problems = []
    cams = []
    cam_path = root / "cameras.json"
    if not cam_path.is_file():
        problems.append(f"missing {cam_path}")
    else:
        try:
            cams = load_cameras(cam_path)
        except (ValueError, KeyError, TypeError) as exc:
            problems.append(f"{cam_path}: {exc}")
    seed_path = root / "seed_points.ply"
    if not seed_path.is_file():
        problems.append(f"missing {seed_path}")
    if len(cams) < 2 and not problems:
        problems.append(f"{cam_path}: need at least 2 frames, found {len(cams)}")

    frames, checksums, chans = [], {}, {}
    for i, cam in enumerate(cams):
        name = f"frame_{i:04d}"
        paths = {"rgb": root / "rgb" / f"{name}.ppm", "aff": root / "aff" / f"{name}.featf1"}
        if require_features or (root / "feat" / f"{name}.featf1").exists():
            paths["feat"] = root / "feat" / f"{name}.featf1"
        missing = [p for p in paths.values() if not p.is_file()]
        if missing:
            problems.extend(f"missing {p}" for p in missing)
            continue
        try:
            rgb = read_ppm(paths["rgb"])
            aff = read_featf1(paths["aff"])
            feat = read_featf1(paths["feat"]) if "feat" in paths else None
        except ValueError as exc:
            problems.append(str(exc))
            continue
        if rgb.shape[:2] != (cam.height, cam.width):
            problems.append(f"{paths['rgb']}: size {rgb.shape[1]}x{rgb.shape[0]} != camera {cam.width}x{cam.height}")
        if aff.shape != (cam.height, cam.width, 1):
            problems.append(f"{paths['aff']}: shape {aff.shape} != ({cam.height}, {cam.width}, 1)")
        elif aff.min() < 0 or aff.max() > 1:
            problems.append(f"{paths['aff']}: values outside [0, 1]")
        if feat is not None:
            chans[paths["feat"]] = feat.shape[2]
        for k, p in paths.items():
            checksums[str(p.relative_to(root))] = _sha(p)
        frames.append(Frame(cam, rgb, FeatureImage(feat, name) if feat is not None else None, aff, name))
    if chans:
        values, counts = np.unique(list(chans.values()), return_counts=True)
        majority = values[np.argmax(counts)]
        problems.extend(f"{p}: {c} channels, expected {majority}" for p, c in chans.items() if c != majority)
    if problems:
        raise DatasetError(problems)
    pts, colors, _ = read_ply(seed_path)
    checksums["seed_points.ply"] = _sha(seed_path)
    return TrainingDataset(frames, pts, colors, checksums)


def write_dataset(root, dataset: TrainingDataset) -> None:
    root = Path(root)
    for sub in ("rgb", "feat", "aff"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    save_cameras(root / "cameras.json", [f.camera for f in dataset.frames])
    for i, f in enumerate(dataset.frames):
        name = f"frame_{i:04d}"
        write_ppm(root / "rgb" / f"{name}.ppm", f.rgb)
        aff = f.affordance if f.affordance is not None else np.zeros(f.rgb.shape[:2] + (1,))
        write_featf1(root / "aff" / f"{name}.featf1", aff)
        if f.features is not None:
            write_featf1(root / "feat" / f"{name}.featf1", f.features.data)
    export_ply(root / "seed_points.ply", dataset.seed_points, dataset.seed_colors)
