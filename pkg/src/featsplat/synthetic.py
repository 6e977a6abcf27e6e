"""Synthetic scenes, cameras and datasets used by the tests, the acceptance suite and the demos."""
from __future__ import annotations

import numpy as np

from .codec import FeatureImage
from .raster import RasterSettings, project_scene, rasterize, render_view
from .scene import CameraModel, GaussianScene, logit, rotmat_to_quat
from .sh import SH_C0, rgb_to_sh0
from .trainer import Frame, TrainingDataset


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    phi = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def frame_from_normal(n) -> np.ndarray:
    """Rotation whose third column is the unit vector ``n``."""
    n = np.asarray(n, dtype=np.float64)
    n = n / np.linalg.norm(n)
    a = np.array([1.0, 0, 0]) if abs(n[0]) < 0.9 else np.array([0, 1.0, 0])
    u = np.cross(n, a)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return np.stack([u, v, n], axis=1)


def surfels(points, normals, colors, radius, thickness_ratio=0.2, opacity=0.95, affordance=None,
            latents=None, latent_dim=3, sh_degree=1) -> GaussianScene:
    """Flattened Gaussians lying in the tangent plane of each normal."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    radius = np.broadcast_to(np.asarray(radius, dtype=np.float64), (n,))
    quats = np.array([rotmat_to_quat(frame_from_normal(nr)) for nr in normals]).reshape(n, 4)
    log_scales = np.log(np.stack([radius, radius, radius * thickness_ratio], axis=1))
    sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
    sh[:, 0] = rgb_to_sh0(np.asarray(colors, dtype=np.float64))
    aff = np.full(n, 0.5) if affordance is None else np.asarray(affordance, dtype=np.float64)
    lat = np.zeros((n, latent_dim)) if latents is None else np.asarray(latents, dtype=np.float64)
    return GaussianScene(points, log_scales, quats, np.full(n, logit(opacity)), sh, lat, logit(aff),
                         sh_degree=sh_degree)


def sphere_scene(n: int = 200, radius: float = 1.0, latent_dim: int = 3, seed: int = 0) -> GaussianScene:
    """Gaussians tiling a sphere with smoothly varying color and a high-affordance top cap."""
    rng = np.random.default_rng(seed)
    dirs = fibonacci_sphere(n)
    pts = dirs * radius
    colors = 0.5 + 0.35 * np.stack([np.sin(2.0 * dirs[:, 0] + 0.3), np.cos(1.7 * dirs[:, 1]),
                                    np.sin(1.3 * dirs[:, 2] + 1.0)], axis=1)
    colors = np.clip(colors + rng.normal(0, 0.03, colors.shape), 0.05, 0.95)
    spacing = radius * np.sqrt(4 * np.pi / n)
    aff = np.where(dirs[:, 2] > 0.5, 0.9, 0.1)
    return surfels(pts, dirs, colors, 0.6 * spacing, affordance=aff, latent_dim=latent_dim)


def orbit_cameras(n: int, distance: float, width: int = 128, height: int = 128, fov_deg: float = 50.0,
                  target=(0.0, 0.0, 0.0), jitter: float = 0.0) -> list[CameraModel]:
    """Cameras on a sphere around ``target`` (offset half a step so none sits on a pole)."""
    dirs = fibonacci_sphere(n)
    if jitter:
        ang = jitter
        c, s = np.cos(ang), np.sin(ang)
        dirs = dirs @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]).T
    target = np.asarray(target, dtype=np.float64)
    return [CameraModel.look_at(target + distance * d, target, width=width, height=height, fov_deg=fov_deg)
            for d in dirs]


def scaled_camera(cam: CameraModel, factor: int) -> CameraModel:
    """Same pose at 1/factor resolution."""
    w, h = cam.width // factor, cam.height // factor
    sx, sy = w / cam.width, h / cam.height
    return CameraModel(cam.fx * sx, cam.fy * sy, cam.cx * sx, cam.cy * sy, w, h, cam.R, cam.t)


def render_feature_map(scene: GaussianScene, cam: CameraModel, embeddings, settings=None) -> np.ndarray:
    settings = settings or RasterSettings()
    proj = project_scene(scene, cam, settings)
    out, _, _ = rasterize(proj, cam.height, cam.width, settings, feats=embeddings)
    return out


def render_frames(scene: GaussianScene, cams, embeddings=None, feature_downsample: int = 2,
                  settings=None) -> list[Frame]:
    """Ground-truth frames: RGB and affordance renders, plus feature maps at reduced resolution."""
    frames = []
    for i, cam in enumerate(cams):
        buf = render_view(scene, cam, settings)
        feats = None
        if embeddings is not None:
            fcam = scaled_camera(cam, feature_downsample)
            feats = FeatureImage(render_feature_map(scene, fcam, embeddings, settings), source=f"frame_{i:04d}")
        frames.append(Frame(cam, buf.rgb.copy(), feats, np.clip(buf.affordance, 0, 1), name=f"frame_{i:04d}"))
    return frames


def perturbed_dataset(gt: GaussianScene, frames, position_noise: float, color_noise: float = 0.05,
                      seed: int = 0) -> TrainingDataset:
    """Dataset whose seed cloud is the ground-truth centres and colors with Gaussian noise added."""
    rng = np.random.default_rng(seed)
    pts = gt.means + rng.normal(0, position_noise, (len(gt), 3))
    colors = np.clip(gt.sh[:, 0] * SH_C0 + 0.5
                     + rng.normal(0, color_noise, (len(gt), 3)), 0, 1)
    return TrainingDataset(list(frames), pts, colors)


def random_embeddings(k: int, dim: int, seed: int = 0, nonnegative: bool = False) -> np.ndarray:
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(k, dim))
    if nonnegative:
        e = np.abs(e)
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def random_scene(n: int, latent_dim: int = 3, sh_degree: int = 1, seed: int = 0, depth=(3.0, 5.0),
                 spread: float = 1.0, alpha=(0.05, 0.7), log_scale=(-2.3, -1.2)) -> GaussianScene:
    """Random Gaussians in front of an identity camera; colors kept away from the clamp limits."""
    rng = np.random.default_rng(seed)
    means = np.column_stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n),
                             rng.uniform(*depth, n)])
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    k = (sh_degree + 1) ** 2
    sh = rng.normal(0, 0.15, (n, k, 3))
    sh[:, 0] = rgb_to_sh0(rng.uniform(0.25, 0.75, (n, 3)))
    return GaussianScene(means, rng.uniform(*log_scale, (n, 3)), q, logit(rng.uniform(*alpha, n)), sh,
                         rng.normal(0, 1, (n, latent_dim)), rng.normal(0, 1, n), sh_degree=sh_degree)


def front_camera(size: int = 16, fov_deg: float = 60.0) -> CameraModel:
    f = 0.5 * size / np.tan(np.radians(fov_deg) / 2)
    return CameraModel(f, f, size / 2.0, size / 2.0, size, size)


def two_cluster_scene(n_per: int = 60, latent_dim: int = 3, seed: int = 0):
    """Two separated spheres of surfels; returns (scene, cluster labels)."""
    rng = np.random.default_rng(seed)
    pts, normals, colors, labels = [], [], [], []
    for lab, (cx, col) in enumerate([(-0.6, (0.8, 0.3, 0.2)), (0.6, (0.2, 0.4, 0.8))]):
        d = fibonacci_sphere(n_per)
        pts.append(d * 0.35 + [cx, 0.0, 0.0])
        normals.append(d)
        colors.append(np.clip(np.array(col) + rng.normal(0, 0.03, (n_per, 3)), 0, 1))
        labels.append(np.full(n_per, lab))
    pts, normals, colors, labels = map(np.concatenate, (pts, normals, colors, labels))
    spacing = 0.35 * np.sqrt(4 * np.pi / n_per)
    return surfels(pts, normals, colors, 0.7 * spacing, latent_dim=latent_dim), labels


def plane_scene(grid: int = 24, size: float = 2.0, latent_dim: int = 3, seed: int = 0) -> GaussianScene:
    """Square grid of flat Gaussians on z = 0 with a smooth color ramp."""
    rng = np.random.default_rng(seed)
    u = (np.arange(grid) + 0.5) / grid * size - size / 2
    X, Y = np.meshgrid(u, u, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel(), np.zeros(grid * grid)])
    colors = np.column_stack([0.4 + 0.2 * pts[:, 0] / size, 0.5 + 0.2 * pts[:, 1] / size, np.full(len(pts), 0.45)])
    colors = colors + rng.normal(0, 0.005, colors.shape)
    normals = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
    return surfels(pts, normals, colors, 0.8 * size / grid, thickness_ratio=0.1, opacity=0.98,
                   latent_dim=latent_dim)


def mug_scene(latent_dim: int = 3, seed: int = 0):
    """Cylindrical mug body (beta 0.2) with a torus-arc handle on +x (beta 0.9).

    Returns (scene, dict of component index arrays).
    """
    rng = np.random.default_rng(seed)
    body_r, body_h = 0.04, 0.10
    th = np.linspace(0, 2 * np.pi, 48, endpoint=False)
    zs = np.linspace(0.005, body_h - 0.005, 12)
    T, Z = np.meshgrid(th, zs)
    body = np.column_stack([body_r * np.cos(T.ravel()), body_r * np.sin(T.ravel()), Z.ravel()])
    body_n = np.column_stack([np.cos(T.ravel()), np.sin(T.ravel()), np.zeros(T.size)])
    # handle: semicircle in the xz-plane outside the body at +x
    phi = np.linspace(-np.pi / 2, np.pi / 2, 24)
    hr, hc = 0.03, np.array([body_r, 0.0, body_h / 2])
    handle = hc + np.column_stack([hr * np.cos(phi), np.zeros_like(phi), hr * np.sin(phi)])
    handle_n = np.column_stack([np.cos(phi), np.zeros_like(phi), np.sin(phi)])
    pts = np.concatenate([body, handle])
    normals = np.concatenate([body_n, handle_n])
    aff = np.concatenate([np.full(len(body), 0.2), np.full(len(handle), 0.9)])
    colors = np.clip(np.full((len(pts), 3), 0.7) + rng.normal(0, 0.02, (len(pts), 3)), 0, 1)
    scene = surfels(pts, normals, colors, 0.006, affordance=aff, latent_dim=latent_dim)
    return scene, {"body": np.arange(len(body)), "handle": np.arange(len(body), len(pts))}


def random_targets(height: int, width: int, latent_dim: int, seed: int = 0):
    """Random supervision for gradient checks: RGB and affordance in (0.1, 0.9), normal semantics."""
    from .losses import ViewTargets

    rng = np.random.default_rng(seed)
    return ViewTargets(rng.uniform(0.1, 0.9, (height, width, 3)), rng.uniform(0.1, 0.9, (height, width, 1)),
                       rng.normal(0, 1, (height, width, latent_dim)))


def gradcheck_fixture(seed: int, max_gaussians: int = 8, size: int = 16, latent_dim: int = 3):
    """(scene, camera, targets) for one finite-difference check; the Gaussian count varies with the seed."""
    rng = np.random.default_rng(10_000 + seed)
    n = int(rng.integers(1, max_gaussians + 1))
    scene = random_scene(n, latent_dim=latent_dim, sh_degree=int(rng.integers(0, 3)), seed=seed)
    return scene, front_camera(size), random_targets(size, size, latent_dim, seed)


KITCHEN_LABELS = ("table", "pot", "burner", "fruit")


def kitchen_scene(seed: int = 0):
    """Tabletop with a pot, a burner disc and a fruit; latents are one-hot label embeddings.

    The table has no Gaussians under the pot (it was never visible). Returns
    (scene, labels array, embedding table dict) with latent_dim = 4, meant for an identity codec.
    """
    rng = np.random.default_rng(seed)
    parts, normals, colors, radii, labels = [], [], [], [], []

    def add(p, n, c, r, lab):
        parts.append(p)
        normals.append(n)
        colors.append(np.clip(np.asarray(c) + rng.normal(0, 0.02, (len(p), 3)), 0, 1))
        radii.append(np.full(len(p), r))
        labels.append(np.full(len(p), lab))

    pot_c, pot_r, pot_h = np.array([-0.25, 0.0]), 0.1, 0.12
    u = (np.arange(30) + 0.5) / 30 * 1.0 - 0.5
    v = (np.arange(18) + 0.5) / 18 * 0.6 - 0.3
    X, Y = np.meshgrid(u, v, indexing="ij")
    table = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    table = table[np.linalg.norm(table[:, :2] - pot_c, axis=1) > pot_r]
    add(table, np.tile([0, 0, 1.0], (len(table), 1)), (0.6, 0.45, 0.3), 0.028, 0)
    th = np.linspace(0, 2 * np.pi, 32, endpoint=False)
    zs = np.linspace(0.01, pot_h, 7)
    T, Z = np.meshgrid(th, zs)
    wall = np.column_stack([pot_c[0] + pot_r * np.cos(T.ravel()), pot_c[1] + pot_r * np.sin(T.ravel()), Z.ravel()])
    wall_n = np.column_stack([np.cos(T.ravel()), np.sin(T.ravel()), np.zeros(T.size)])
    add(wall, wall_n, (0.25, 0.25, 0.28), 0.017, 1)
    rr = np.array([0.03, 0.06, 0.085])
    disc = np.array([(r * np.cos(a), r * np.sin(a)) for r in rr for a in np.linspace(0, 2 * np.pi, int(r / 0.012) + 3,
                                                                                      endpoint=False)])
    disc = np.vstack([[0.0, 0.0], disc])
    bottom = np.column_stack([disc + pot_c, np.full(len(disc), 0.01)])
    add(bottom, np.tile([0, 0, 1.0], (len(bottom), 1)), (0.25, 0.25, 0.28), 0.02, 1)
    burner = np.column_stack([disc + [0.25, 0.0], np.full(len(disc), 0.006)])
    add(burner, np.tile([0, 0, 1.0], (len(burner), 1)), (0.8, 0.15, 0.1), 0.02, 2)
    fd = fibonacci_sphere(40)
    add(fd * 0.04 + [0.0, 0.2, 0.045], fd, (0.95, 0.55, 0.1), 0.012, 3)
    pts, nrm, col, rad, lab = map(np.concatenate, (parts, normals, colors, radii, labels))
    emb = np.eye(4)
    scene = surfels(pts, nrm, col, rad, thickness_ratio=0.15, opacity=0.97, latents=emb[lab], latent_dim=4)
    return scene, lab, {name: emb[i] for i, name in enumerate(KITCHEN_LABELS)}


def write_kitchen_pipeline(root, seed: int = 0, with_cameras: bool = True, stage2_candidates: bool = True):
    """Write the two-stage fixture: pot onto the burner, then the fruit into the pot.

    Returns the config path.
    """
    from pathlib import Path

    from .codec import Codec, save_codec
    from .dataset import save_cameras
    from .grasp import grasp_from_approach, write_candidates
    from .query import TableEmbeddings
    from .scene import save_scene

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    scene, labels, table = kitchen_scene(seed)
    save_scene(scene, root / "scene.splat")
    save_codec(Codec.identity(4), root / "codec.bin")
    TableEmbeddings(table).to_tsv(root / "embeddings.tsv")
    pot = scene.means[labels == 1]
    rim = pot[np.argmax(pot[:, 0])]
    write_candidates(root / "grasps_pot.csv", [
        grasp_from_approach(rim, [0, 0, -1], [1, 0, 0], score=0.6, width=0.04),
        grasp_from_approach(pot.mean(axis=0) + [0, 0, 0.2], [0, 0, -1], [1, 0, 0], score=0.9, width=0.04),
    ])
    fruit = scene.means[labels == 3].mean(axis=0)
    if stage2_candidates:
        write_candidates(root / "grasps_fruit.csv", [grasp_from_approach(fruit, [0, 0, -1], [1, 0, 0], 0.8, 0.1)])
    if with_cameras:
        save_cameras(root / "cameras.json", [
            CameraModel.look_at([0.0, -1.1, 0.9], [0.0, 0.0, 0.05], width=64, height=48, fov_deg=55)])
    text = f"""[pipeline]
scene = scene.splat
codec = codec.bin
embeddings = embeddings.tsv
output = out
{"cameras = cameras.json" if with_cameras else ""}
radius = 0.05
infill = true

[stage.1]
positive = pot
negative = table
candidates = grasps_pot.csv
place = on
target_positive = burner
target_negative = table
margin = 0.005

[stage.2]
positive = fruit
negative = table
candidates = grasps_fruit.csv
place = inside
target_positive = pot
target_negative = table
"""
    cfg = root / "pipeline.ini"
    cfg.write_text(text)
    return cfg
