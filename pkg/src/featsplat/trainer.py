"""Two-phase scene optimisation: geometry/color/affordance first, semantic latents second."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .backward import PARAM_CLASSES, scene_backward
from .backward import upstream_from_buffers
from .codec import Codec, FeatureImage
from .losses import LossWeights, ViewTargets, semantic_target, view_loss
from .optim import Adam
from .raster import RasterSettings, render_view
from .scene import CameraModel, GaussianScene, logit, sh_count
from .sh import rgb_to_sh0

log = logging.getLogger(__name__)

PHASE1_CLASSES = tuple(c for c in PARAM_CLASSES if c != "latents")


class TrainingError(RuntimeError):
    pass


@dataclass
class Frame:
    camera: CameraModel
    rgb: np.ndarray
    features: FeatureImage | None = None
    affordance: np.ndarray | None = None
    name: str = ""


@dataclass
class TrainingDataset:
    frames: list
    seed_points: np.ndarray
    seed_colors: np.ndarray
    checksums: dict = field(default_factory=dict)

    def __post_init__(self):
        self.seed_points = np.asarray(self.seed_points, dtype=np.float64).reshape(-1, 3)
        self.seed_colors = np.asarray(self.seed_colors, dtype=np.float64).reshape(-1, 3)
        if len(self.frames) < 2:
            raise ValueError(f"need at least 2 frames, got {len(self.frames)}")
        chans = {f.features.channels for f in self.frames if f.features is not None}
        if len(chans) > 1:
            raise ValueError(f"frames disagree on feature channels: {sorted(chans)}")
        for f in self.frames:
            if f.affordance is not None and (np.min(f.affordance) < 0 or np.max(f.affordance) > 1):
                raise ValueError(f"affordance image {f.name!r} outside [0, 1]")
            if not np.all(np.isfinite(f.camera.world_to_cam)):
                raise ValueError(f"non-finite pose in frame {f.name!r}")

    @property
    def feature_dim(self) -> int | None:
        for f in self.frames:
            if f.features is not None:
                return f.features.channels
        return None


@dataclass
class TrainConfig:
    phase1_iters: int = 2000
    phase2_iters: int = 1000
    lr_mean: float = 1.6e-4  # multiplied by the scene extent
    lr_log_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_affordance: float = 5e-2
    lr_semantic: float = 2.5e-2
    kappa_s: float = 1.0
    kappa_g: float = 1.0
    kappa_b: float = 1.0
    lambda_ssim: float = 0.2
    prune_opacity_threshold: float = 0.005
    prune_every: int = 500
    seed: int = 0
    sh_degree: int = 1
    latent_dim: int = 3
    codec_epochs: int = 1000
    codec_lr: float = 1e-3
    simultaneous_semantic: bool = False

    def __post_init__(self):
        if self.phase1_iters <= 0 or self.phase2_iters <= 0:
            raise ValueError("iteration counts must be positive")
        for f in fields(self):
            if f.name.startswith("lr_") and getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.kappa_s, self.kappa_g, self.kappa_b, self.lambda_ssim)

    def learning_rates(self, extent: float) -> dict:
        return {"means": self.lr_mean * max(extent, 1e-6), "log_scales": self.lr_log_scale,
                "quats": self.lr_rotation, "opacity_logits": self.lr_opacity, "sh": self.lr_sh,
                "latents": self.lr_semantic, "aff_logits": self.lr_affordance}

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ValueError(f"{path}:{n}: unknown key {key!r}")
            kind = kinds[key]
            if kind in (bool, "bool"):
                values[key] = val.lower() in ("1", "true", "yes", "on")
            elif kind in (int, "int"):
                values[key] = int(val)
            else:
                values[key] = float(val)
        return cls(**values)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


@dataclass
class LossTrace:
    rows: list = field(default_factory=list)

    def add(self, phase: int, iteration: int, total: float, parts: dict) -> None:
        self.rows.append({"phase": phase, "iteration": iteration, "total": total,
                          "rgb": parts.get("rgb", ""), "affordance": parts.get("affordance", ""),
                          "semantic": parts.get("semantic", "")})

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["phase", "iteration", "total", "rgb", "affordance", "semantic"])
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})

    def totals(self, phase: int | None = None) -> np.ndarray:
        return np.array([r["total"] for r in self.rows if phase is None or r["phase"] == phase])


def init_scene(dataset: TrainingDataset, sh_degree: int = 1, latent_dim: int = 3) -> GaussianScene:
    """One isotropic Gaussian per seed point, scaled by the mean distance to its 3 nearest neighbours."""
    pts = dataset.seed_points
    n = len(pts)
    if n == 0:
        raise ValueError("seed point cloud is empty")
    extent = float(np.max(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
    if n == 1:
        # no neighbours: 1% of the extent, or of a unit extent for a lone point
        dist = np.array([0.01 * (extent if extent > 0 else 1.0)])
    else:
        k = min(3, n - 1)
        d, _ = cKDTree(pts).query(pts, k=k + 1)
        dist = np.maximum(d[:, 1:].mean(axis=1), 1e-7)
    log_scale = np.repeat(np.log(dist)[:, None], 3, axis=1)
    sh = np.zeros((n, sh_count(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh0(dataset.seed_colors)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianScene(pts, log_scale, quats, np.full(n, logit(0.1)), sh, np.zeros((n, latent_dim)),
                         np.full(n, logit(0.1)), sh_degree=sh_degree, extent=extent)


def _frame_order(rng, n_frames: int, iters: int) -> np.ndarray:
    order = []
    while len(order) < iters:
        order.extend(rng.permutation(n_frames).tolist())
    return np.array(order[:iters], dtype=np.int64)


def _step(scene: GaussianScene, cam, targets, weights, terms, settings):
    buffers, state = render_view(scene, cam, settings, return_state=True)
    total, parts, upstream = view_loss(buffers, targets, weights, terms)
    g_out, g_acc = upstream_from_buffers(upstream, scene.latent_dim)
    grads = scene_backward(scene, cam, state, g_out, g_acc)
    return total, parts, grads


def prune(scene: GaussianScene, threshold: float, opt: Adam | None = None) -> GaussianScene:
    """Drop Gaussians whose opacity is below ``threshold``."""
    keep = scene.opacities >= threshold
    if keep.all():
        return scene
    if opt is not None:
        for name in PARAM_CLASSES:
            opt.keep(name, keep)
    return scene.subset(np.flatnonzero(keep))


def train_phase1(scene: GaussianScene, dataset: TrainingDataset, cfg: TrainConfig,
                 settings: RasterSettings | None = None, trace: LossTrace | None = None,
                 semantic_targets: list | None = None):
    """Photometric + affordance optimisation of every parameter class except the semantic latents.

    When ``semantic_targets`` is given (simultaneous schedule) the latents are trained too.
    Returns (scene, trace).
    """
    trace = trace if trace is not None else LossTrace()
    rng = np.random.default_rng(cfg.seed)
    weights = cfg.weights
    opt = Adam(cfg.learning_rates(scene.extent))
    classes = PARAM_CLASSES if semantic_targets is not None else PHASE1_CLASSES
    terms = ("rgb", "affordance", "semantic") if semantic_targets is not None else ("rgb", "affordance")
    order = _frame_order(rng, len(dataset.frames), cfg.phase1_iters)
    for it, fi in enumerate(order):
        fr = dataset.frames[fi]
        sem = semantic_targets[fi] if semantic_targets is not None else None
        targets = ViewTargets(fr.rgb, fr.affordance, sem)
        total, parts, grads = _step(scene, fr.camera, targets, weights, terms, settings)
        if not np.isfinite(total) or not grads.is_finite():
            raise TrainingError(f"non-finite loss or gradient at phase-1 iteration {it}")
        trace.add(1, it, total, parts)
        params = {c: getattr(scene, c) for c in classes}
        new = opt.step(params, {c: getattr(grads, c) for c in classes})
        for c, v in new.items():
            setattr(scene, c, v)
        scene.renormalize()
        if cfg.prune_every and (it + 1) % cfg.prune_every == 0:
            scene = prune(scene, cfg.prune_opacity_threshold, opt)
    return scene, trace


def semantic_targets_for(dataset: TrainingDataset, codec: Codec) -> list:
    out = []
    for fr in dataset.frames:
        if fr.features is None:
            raise ValueError(f"frame {fr.name!r} has no feature map")
        out.append(semantic_target(fr.features.data, codec.encode, fr.camera.height, fr.camera.width))
    return out


def train_phase2(scene: GaussianScene, dataset: TrainingDataset, codec: Codec, cfg: TrainConfig,
                 settings: RasterSettings | None = None, trace: LossTrace | None = None):
    """Fit only the semantic latents against the encoded feature maps; everything else stays frozen.

    All-zero latents are first set to the mean encoded target: at a zero rendered feature the
    cosine gradient is unbounded and would stall Adam for thousands of steps.
    """
    if codec.latent_dim != scene.latent_dim:
        raise ValueError(f"codec latent_dim {codec.latent_dim} != scene latent_dim {scene.latent_dim}")
    trace = trace if trace is not None else LossTrace()
    rng = np.random.default_rng(cfg.seed + 1)
    targets_sem = semantic_targets_for(dataset, codec)
    if not scene.latents.any():
        scene.latents = np.tile(np.mean([t.reshape(-1, t.shape[-1]).mean(axis=0) for t in targets_sem], axis=0),
                                (len(scene), 1))
    opt = Adam({"latents": cfg.lr_semantic})
    weights = cfg.weights
    order = _frame_order(rng, len(dataset.frames), cfg.phase2_iters)
    for it, fi in enumerate(order):
        fr = dataset.frames[fi]
        total, parts, grads = _step(scene, fr.camera, ViewTargets(semantic=targets_sem[fi]), weights,
                                    ("semantic",), settings)
        if not np.isfinite(total) or not np.all(np.isfinite(grads.latents)):
            raise TrainingError(f"non-finite loss or gradient at phase-2 iteration {it}")
        trace.add(2, it, total, parts)
        scene.latents = opt.step({"latents": scene.latents}, {"latents": grads.latents})["latents"]
    return scene, trace


def train(dataset: TrainingDataset, cfg: TrainConfig, codec: Codec | None = None,
          settings: RasterSettings | None = None, scene: GaussianScene | None = None):
    """Initialise (unless ``scene`` is given) and run both phases. Returns (scene, trace).

    The returned scene is rounded to float32, so it is exactly what a saved file reloads as.
    """
    scene = scene if scene is not None else init_scene(dataset, cfg.sh_degree, cfg.latent_dim)
    trace = LossTrace()
    if cfg.simultaneous_semantic and codec is not None:
        sem = semantic_targets_for(dataset, codec)
        scene, trace = train_phase1(scene, dataset, cfg, settings, trace, semantic_targets=sem)
        return scene.quantized(), trace
    scene, trace = train_phase1(scene, dataset, cfg, settings, trace)
    if codec is not None:
        scene, trace = train_phase2(scene, dataset, codec, cfg, settings, trace)
    return scene.quantized(), trace
