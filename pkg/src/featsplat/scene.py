"""Gaussian primitives, scene container, camera model and the SPLATF1 format."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLAT_MAGIC = b"SPLATF1\0"
_HEADER = struct.Struct("<8sIIIf")


class InvalidParameterError(ValueError):
    pass


class SceneFormatError(ValueError):
    """Malformed scene file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def sh_count(degree: int) -> int:
    return (degree + 1) ** 2


def normalize_quat(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise InvalidParameterError("zero-norm quaternion")
    return q / n


def quat_to_rotmat(q):
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order.

    Quaternions are normalized first, so any nonzero quaternion is accepted.
    """
    q = normalize_quat(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R):
    """Unit quaternion (w, x, y, z) with w >= 0 for a single rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_multiply(a, b):
    """Hamilton product a*b for (..., 4) arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def covariance_from_params(log_scale, rotation):
    """Sigma = R S S^T R^T with S = diag(exp(log_scale)).

    Works on a single Gaussian ((3,), (4,)) or batches ((N, 3), (N, 4)).
    """
    R = quat_to_rotmat(rotation)
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    M = R * s[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass
class GaussianPrimitive:
    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray
    semantic_latent: np.ndarray
    affordance_logit: float

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def affordance(self) -> float:
        return float(sigmoid(self.affordance_logit))


_FIELDS = ("means", "log_scales", "quats", "opacity_logits", "sh", "latents", "aff_logits")


@dataclass
class GaussianScene:
    """Struct-of-arrays Gaussian scene held in float64; files store float32.

    ``sh`` has shape (N, (sh_degree+1)**2, 3), ``quats`` is (w, x, y, z).
    """

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    latents: np.ndarray
    aff_logits: np.ndarray
    sh_degree: int = 1
    extent: float = 0.0

    def __post_init__(self):
        n = len(self.means)
        self.means = np.asarray(self.means, dtype=np.float64).reshape(n, 3)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, sh_count(self.sh_degree), 3)
        self.latents = np.asarray(self.latents, dtype=np.float64).reshape(n, -1) if n else \
            np.asarray(self.latents, dtype=np.float64).reshape(0, np.asarray(self.latents).shape[-1])
        self.aff_logits = np.asarray(self.aff_logits, dtype=np.float64).reshape(n)
        if not 0 <= self.sh_degree <= 2:
            raise InvalidParameterError(f"sh_degree must be 0..2, got {self.sh_degree}")
        if not self.extent:
            self.extent = self.compute_extent()

    @classmethod
    def empty(cls, latent_dim: int = 3, sh_degree: int = 1) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                   np.zeros((0, sh_count(sh_degree), 3)), np.zeros((0, latent_dim)), np.zeros(0),
                   sh_degree=sh_degree, extent=0.0)

    @classmethod
    def from_primitives(cls, prims, latent_dim: int, sh_degree: int = 1, extent: float = 0.0):
        if not prims:
            scene = cls.empty(latent_dim, sh_degree)
            scene.extent = extent
            return scene
        return cls(
            np.array([p.mean for p in prims]),
            np.array([p.log_scale for p in prims]),
            np.array([p.rotation for p in prims]),
            np.array([p.opacity_logit for p in prims]),
            np.array([p.sh_coeffs for p in prims]),
            np.array([p.semantic_latent for p in prims]).reshape(len(prims), latent_dim),
            np.array([p.affordance_logit for p in prims]),
            sh_degree=sh_degree,
            extent=extent,
        )

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.means[i].copy(), self.log_scales[i].copy(), self.quats[i].copy(),
                                 float(self.opacity_logits[i]), self.sh[i].copy(), self.latents[i].copy(),
                                 float(self.aff_logits[i]))

    @property
    def gaussians(self) -> list[GaussianPrimitive]:
        return [self[i] for i in range(len(self))]

    @property
    def latent_dim(self) -> int:
        return self.latents.shape[1]

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def affordances(self) -> np.ndarray:
        return sigmoid(self.aff_logits)

    def compute_extent(self) -> float:
        if len(self) == 0:
            return 0.0
        m = self.means.astype(np.float64)
        return float(np.max(np.linalg.norm(m - m.mean(axis=0), axis=1)))

    def covariances(self) -> np.ndarray:
        return covariance_from_params(self.log_scales, self.quats)

    def copy(self) -> "GaussianScene":
        return GaussianScene(*(getattr(self, f).copy() for f in _FIELDS),
                             sh_degree=self.sh_degree, extent=self.extent)

    def subset(self, idx) -> "GaussianScene":
        idx = np.asarray(idx, dtype=np.int64)
        return GaussianScene(*(getattr(self, f)[idx] for f in _FIELDS),
                             sh_degree=self.sh_degree, extent=self.extent)

    def remove(self, idx) -> "GaussianScene":
        keep = np.ones(len(self), dtype=bool)
        keep[np.asarray(idx, dtype=np.int64)] = False
        return self.subset(np.flatnonzero(keep))

    def append(self, other: "GaussianScene") -> "GaussianScene":
        if other.latent_dim != self.latent_dim or other.sh_degree != self.sh_degree:
            raise InvalidParameterError("cannot append scenes with different layouts")
        return GaussianScene(*(np.concatenate([getattr(self, f), getattr(other, f)]) for f in _FIELDS),
                             sh_degree=self.sh_degree, extent=self.extent)

    def renormalize(self) -> None:
        n = np.linalg.norm(self.quats.astype(np.float64), axis=1, keepdims=True)
        n[n == 0] = 1.0
        self.quats = self.quats / n

    def to_bytes(self) -> bytes:
        return save_scene_bytes(self)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def equals(self, other: "GaussianScene") -> bool:
        """Exact equality of layout and every parameter array."""
        return (self.sh_degree == other.sh_degree and len(self) == len(other)
                and self.latent_dim == other.latent_dim
                and all(np.array_equal(getattr(self, f), getattr(other, f)) for f in _FIELDS))

    def quantized(self) -> "GaussianScene":
        """Copy with every parameter rounded to float32, as stored on disk."""
        return GaussianScene(*(getattr(self, f).astype(np.float32).astype(np.float64) for f in _FIELDS),
                             sh_degree=self.sh_degree, extent=float(np.float32(self.extent)))


def record_floats(latent_dim: int, sh_degree: int) -> int:
    return 3 + 3 + 4 + 1 + 3 * sh_count(sh_degree) + latent_dim + 1


def save_scene_bytes(scene: GaussianScene) -> bytes:
    n = len(scene)
    header = _HEADER.pack(SPLAT_MAGIC, n, scene.latent_dim, scene.sh_degree, scene.extent)
    body = np.concatenate([
        scene.means, scene.log_scales, scene.quats, scene.opacity_logits[:, None],
        scene.sh.reshape(n, 3 * sh_count(scene.sh_degree)), scene.latents, scene.aff_logits[:, None],
    ], axis=1).astype("<f4")
    return header + body.tobytes()


def load_scene_bytes(data: bytes) -> GaussianScene:
    if len(data) < _HEADER.size:
        raise SceneFormatError("truncated header", len(data))
    magic, n, ldim, deg, extent = _HEADER.unpack_from(data, 0)
    if magic != SPLAT_MAGIC:
        raise SceneFormatError(f"bad magic {magic!r}", 0)
    if deg > 2:
        raise SceneFormatError(f"unsupported sh_degree {deg}", 16)
    rec = 4 * record_floats(ldim, deg)
    payload = len(data) - _HEADER.size
    if payload < n * rec:
        full = payload // rec
        raise SceneFormatError(f"truncated record {full} of {n} (records of {rec} bytes for latent_dim={ldim}, "
                               f"sh_degree={deg})", _HEADER.size + full * rec)
    if payload > n * rec:
        raise SceneFormatError(
            f"payload of {payload} bytes does not match {n} records with latent_dim={ldim}",
            _HEADER.size + n * rec)
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size, count=n * rec // 4)
    arr = arr.reshape(n, rec // 4).astype(np.float64)
    k = 3 * sh_count(deg)
    cols = np.cumsum([0, 3, 3, 4, 1, k, ldim, 1])
    parts = [arr[:, cols[i]:cols[i + 1]] for i in range(len(cols) - 1)]
    return GaussianScene(parts[0], parts[1], parts[2], parts[3][:, 0], parts[4].reshape(n, k // 3, 3),
                         parts[5].reshape(n, ldim), parts[6][:, 0], sh_degree=deg, extent=extent)


def save_scene(scene: GaussianScene, path) -> None:
    Path(path).write_bytes(save_scene_bytes(scene))


def load_scene(path) -> GaussianScene:
    return load_scene_bytes(Path(path).read_bytes())


def export_ply(path, points, colors) -> None:
    """ASCII PLY with x, y, z and 8-bit red, green, blue."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rgb = np.clip(np.round(np.asarray(colors, dtype=np.float64).reshape(-1, 3) * 255), 0, 255).astype(int)
    lines = [
        "ply", "format ascii 1.0", f"element vertex {len(points)}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue", "end_header",
    ]
    lines += [f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}" for p, c in zip(points, rgb)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path):
    """Read an ASCII PLY vertex list. Returns (points, colors in [0, 1], extra columns dict)."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise SceneFormatError(f"{path}: not a PLY file", 0)
    props: list[str] = []
    count = 0
    i = 1
    while i < len(text) and text[i].strip() != "end_header":
        tok = text[i].split()
        if tok[:2] == ["format", "ascii"] or tok[0] in ("comment", "obj_info"):
            pass
        elif tok[0] == "format":
            raise SceneFormatError(f"{path}: only ascii PLY is supported", 0)
        elif tok[0] == "element" and tok[1] == "vertex":
            count = int(tok[2])
        elif tok[0] == "property":
            props.append(tok[-1])
        i += 1
    rows = [list(map(float, ln.split())) for ln in text[i + 1:i + 1 + count]]
    if len(rows) != count:
        raise SceneFormatError(f"{path}: expected {count} vertices, found {len(rows)}", 0)
    data = np.array(rows, dtype=np.float64).reshape(count, len(props))
    col = {name: data[:, j] for j, name in enumerate(props)}
    pts = np.stack([col["x"], col["y"], col["z"]], axis=1)
    if "red" in col:
        colors = np.stack([col["red"], col["green"], col["blue"]], axis=1) / 255.0
    else:
        colors = np.full((count, 3), 0.5)
    extra = {k: v for k, v in col.items() if k not in ("x", "y", "z", "red", "green", "blue")}
    return pts, colors, extra


@dataclass
class CameraModel:
    """Pinhole camera; ``R``/``t`` map world points to camera space: x_c = R x_w + t."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidParameterError("principal point outside the image")
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-6:
            raise InvalidParameterError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def world_to_cam(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    @classmethod
    def from_matrix(cls, fx, fy, cx, cy, width, height, pose) -> "CameraModel":
        T = np.asarray(pose, dtype=np.float64).reshape(4, 4)
        return cls(fx, fy, cx, cy, int(width), int(height), T[:3, :3], T[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, width=64, height=64, fov_deg=50.0) -> "CameraModel":
        """Camera at ``eye`` looking at ``target`` (+z forward, +y down in the image)."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, width / 2.0, height / 2.0, width, height, R, -R @ eye)
