"""Multi-stage manipulation pipeline: select, rank grasps, place, infill, report.

Config is an INI file::

    [pipeline]
    scene = scene.splat
    codec = codec.bin
    embeddings = embeddings.tsv
    output = out
    cameras = cameras.json        # optional, renders before/after each stage
    radius = 0.05
    outlier_k = 10
    outlier_sigma = 2.0
    infill = true
    roi_depth = 0.04
    roi_height = 0.02

    [stage.1]
    positive = pot                # comma separated
    negative = table
    threshold = 0.5
    candidates = grasps_pot.csv
    place = on                    # on | next_to | inside | pose
    target_positive = burner
    target_negative = table
    margin = 0.005
    # place = pose  ->  pose = 16 floats, row-major 4x4 motion applied to the object

Relative paths are resolved against the config file's directory.
"""
from __future__ import annotations

import configparser
import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import load_codec
from .dataset import load_cameras
from .editor import InfillParams, RigidMotion, densify_selection, move_and_infill, remove_outliers
from .grasp import GripperROI, load_candidates, rank_candidates, write_ranked
from .imageio import write_ppm
from .query import QuerySet, TableEmbeddings, relevancy_mask, similarity_scores
from .raster import render_view
from .scene import GaussianScene, load_scene, save_scene_bytes

log = logging.getLogger(__name__)

PRIMITIVES = ("on", "next_to", "inside")


class PipelineError(RuntimeError):
    pass


@dataclass
class StageSpec:
    object_query: QuerySet
    candidates_path: Path | None = None
    pose: np.ndarray | None = None
    target_query: QuerySet | None = None
    primitive: str | None = None
    margin: float = 0.0

    def __post_init__(self):
        if (self.pose is None) == (self.target_query is None):
            raise ValueError("a stage needs exactly one of an explicit pose or a target query")
        if self.target_query is not None and self.primitive not in PRIMITIVES:
            raise ValueError(f"placement primitive must be one of {PRIMITIVES}, got {self.primitive!r}")


@dataclass
class PipelineConfig:
    scene_path: Path
    codec_path: Path
    embeddings_path: Path
    stages: list
    output_dir: Path
    cameras_path: Path | None = None
    radius: float = 0.05
    outlier_k: int = 10
    outlier_sigma: float = 2.0
    infill: bool = True
    roi: GripperROI = field(default_factory=GripperROI)

    def validate(self) -> None:
        if not self.stages:
            raise ValueError("pipeline needs at least one stage")
        for p in (self.scene_path, self.codec_path, self.embeddings_path, self.cameras_path):
            if p is not None and not Path(p).is_file():
                raise FileNotFoundError(f"missing input file {p}")


def _split(v: str) -> list[str]:
    return [s.strip() for s in v.split(",") if s.strip()]


def load_pipeline_config(path) -> PipelineConfig:
    path = Path(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not cp.read(path):
        raise FileNotFoundError(f"cannot read pipeline config {path}")
    if "pipeline" not in cp:
        raise ValueError(f"{path}: missing [pipeline] section")
    base = path.parent
    p = cp["pipeline"]
    rel = lambda v: (base / v) if v else None  # noqa: E731
    stage_names = sorted((s for s in cp.sections() if s.startswith("stage.")), key=lambda s: int(s.split(".")[1]))
    stages = []
    for name in stage_names:
        s = cp[name]
        obj = QuerySet(_split(s.get("positive", "")), _split(s.get("negative", "")), s.getfloat("threshold", 0.5))
        place = s.get("place", "pose")
        if place == "pose":
            pose = np.array([float(x) for x in s.get("pose").replace(",", " ").split()]).reshape(4, 4)
            spec = StageSpec(obj, rel(s.get("candidates")), pose=pose)
        else:
            tq = QuerySet(_split(s.get("target_positive", "")), _split(s.get("target_negative", "")),
                          s.getfloat("target_threshold", obj.threshold))
            spec = StageSpec(obj, rel(s.get("candidates")), target_query=tq, primitive=place,
                             margin=s.getfloat("margin", 0.0))
        stages.append(spec)
    return PipelineConfig(
        rel(p.get("scene")), rel(p.get("codec")), rel(p.get("embeddings")), stages,
        rel(p.get("output", "pipeline_out")), rel(p.get("cameras")), p.getfloat("radius", 0.05),
        p.getint("outlier_k", 10), p.getfloat("outlier_sigma", 2.0), p.getboolean("infill", True),
        GripperROI(p.getfloat("roi_depth", 0.04), p.getfloat("roi_height", 0.02)))


def aabb(points) -> tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise PipelineError("empty target selection")
    return pts.min(axis=0), pts.max(axis=0)


def resolve_place_pose(object_points, target_points, primitive: str, margin: float = 0.0) -> RigidMotion:
    """Translation that places the object relative to the target's axis-aligned box; rotation kept."""
    olo, ohi = aabb(object_points)
    tlo, thi = aabb(target_points)
    oc, tc = (olo + ohi) / 2, (tlo + thi) / 2
    if primitive == "on":
        t = np.array([tc[0] - oc[0], tc[1] - oc[1], thi[2] + margin - olo[2]])
    elif primitive == "next_to":
        half = (ohi[0] - olo[0]) / 2 + (thi[0] - tlo[0]) / 2
        t = np.array([tc[0] + half + margin - oc[0], tc[1] - oc[1], tlo[2] - olo[2]])
    elif primitive == "inside":
        t = tc - oc
    else:
        raise ValueError(f"unknown placement primitive {primitive!r}")
    return RigidMotion(translation=t)


def select_object(scene, queries: QuerySet, provider, codec, radius, k, sigma, exclude=()):
    """Relevancy mask grown by 7D densification and cleaned by the outlier filter."""
    scores = similarity_scores(scene, queries, provider, codec)
    mask = relevancy_mask(scene, queries, provider, codec, scores=scores)
    seeds = np.setdiff1d(mask.indices, np.asarray(exclude, dtype=np.int64))
    if len(seeds) == 0:
        return seeds, seeds, scores
    dense = densify_selection(scene, seeds, radius, scores=scores)
    dense = np.setdiff1d(dense, np.asarray(exclude, dtype=np.int64))
    if len(dense) > k:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            dense = remove_outliers(dense, scene, k, sigma)
    return seeds, dense, scores


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, (list, tuple, np.ndarray)):
        return ",".join(_fmt(x) for x in np.asarray(v).ravel())
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def write_report(path, items: dict) -> None:
    Path(path).write_text("".join(f"{k}={_fmt(v)}\n" for k, v in items.items()))


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


@dataclass
class StageResult:
    index: int
    scene_path: Path
    report_path: Path
    report: dict
    selection: np.ndarray
    motion: RigidMotion


def run_pipeline(cfg: PipelineConfig, scene: GaussianScene | None = None) -> list[StageResult]:
    """Run every stage in order; stage k reads exactly the scene written by stage k-1."""
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = load_scene(cfg.scene_path) if scene is None else scene.quantized()
    codec = load_codec(cfg.codec_path)
    provider = TableEmbeddings.from_tsv(cfg.embeddings_path)
    cams = load_cameras(cfg.cameras_path) if cfg.cameras_path else []
    results = []
    prev_hash = _sha(save_scene_bytes(scene))
    for k, stage in enumerate(cfg.stages, 1):
        tag = f"stage {k}"
        try:
            res, scene = _run_stage(k, stage, scene, cfg, codec, provider, cams, out, prev_hash)
        except (OSError, ValueError, KeyError) as exc:
            raise PipelineError(f"{tag}: {exc}") from exc
        prev_hash = res.report["output_sha256"]
        results.append(res)
    return results


def _run_stage(k, stage: StageSpec, scene, cfg, codec, provider, cams, out: Path, in_hash):
    tag = f"stage {k}"
    seeds, sel, _ = select_object(scene, stage.object_query, provider, codec, cfg.radius, cfg.outlier_k,
                                  cfg.outlier_sigma)
    if len(sel) == 0:
        raise PipelineError(f"{tag}: empty object selection for {stage.object_query.positives}")
    if stage.candidates_path is not None:
        if not Path(stage.candidates_path).is_file():
            raise PipelineError(f"{tag}: missing grasp candidates file {stage.candidates_path}")
        ranked = rank_candidates(load_candidates(stage.candidates_path), scene, cfg.roi, selection=sel)
    else:
        ranked = []
    target_sel = np.zeros(0, dtype=np.int64)
    if stage.target_query is not None:
        _, target_sel, _ = select_object(scene, stage.target_query, provider, codec, cfg.radius,
                                         cfg.outlier_k, cfg.outlier_sigma, exclude=sel)
        if len(target_sel) == 0:
            raise PipelineError(f"{tag}: empty target selection for {stage.target_query.positives}")
        motion = resolve_place_pose(scene.means[sel], scene.means[target_sel], stage.primitive, stage.margin)
    else:
        motion = RigidMotion.from_matrix(stage.pose)

    before = scene
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        edited, inserted = move_and_infill(scene, sel, motion, InfillParams(), infill=cfg.infill)
    edited = edited.quantized()

    stem = out / f"stage_{k}"
    data = save_scene_bytes(edited)
    scene_path = Path(f"{stem}.splat")
    scene_path.write_bytes(data)
    grasp_path = Path(f"{stem}_grasps.csv")
    write_ranked(grasp_path, ranked)
    renders = []
    for ci, cam in enumerate(cams):
        for label, s in (("before", before), ("after", edited)):
            p = Path(f"{stem}_cam{ci}_{label}.ppm")
            write_ppm(p, render_view(s, cam).rgb)
            renders.append(p.name)
    report = {
        "stage": k,
        "input_sha256": in_hash,
        "output_sha256": _sha(data),
        "object_query": ",".join(stage.object_query.positives),
        "seed_mask_size": len(seeds),
        "selection_size": len(sel),
        "target_selection_size": len(target_sel),
        "placement": stage.primitive or "pose",
        "transform_quat": motion.rotation,
        "transform_translation": motion.translation,
        "inserted": len(inserted),
        "gaussians": len(edited),
        "grasp_count": len(ranked),
        "top_nu": ranked[0].nu if ranked else 0.0,
        "top_grasp_index": ranked[0].index if ranked else -1,
        "scene_file": scene_path.name,
        "grasps_file": grasp_path.name,
        "renders": ";".join(renders),
        "selection": sel,
    }
    report_path = Path(f"{stem}_report.txt")
    write_report(report_path, report)  # written last: the report commits the stage
    return StageResult(k, scene_path, report_path, {k2: _fmt(v) for k2, v in report.items()}, sel, motion), edited
