"""Real spherical harmonics up to degree 2 (graphics convention, +0.5 color offset)."""
import numpy as np

from .scene import sh_count

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)


def sh_basis(dirs, degree: int):
    """Basis values, shape (..., (degree+1)**2), for unit directions (..., 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full(x.shape, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        out += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * z * z - x * x - y * y),
                SH_C2[3] * x * z, SH_C2[4] * (x * x - y * y)]
    return np.stack(out, axis=-1)


def sh_basis_grad(dirs, degree: int):
    """d basis / d dir, shape (..., K, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    g = np.zeros(d.shape[:-1] + (sh_count(degree), 3))
    if degree >= 1:
        g[..., 1, 1] = -SH_C1
        g[..., 2, 2] = SH_C1
        g[..., 3, 0] = -SH_C1
    if degree >= 2:
        g[..., 4, 0] = SH_C2[0] * y
        g[..., 4, 1] = SH_C2[0] * x
        g[..., 5, 1] = SH_C2[1] * z
        g[..., 5, 2] = SH_C2[1] * y
        g[..., 6, 0] = -2 * SH_C2[2] * x
        g[..., 6, 1] = -2 * SH_C2[2] * y
        g[..., 6, 2] = 4 * SH_C2[2] * z
        g[..., 7, 0] = SH_C2[3] * z
        g[..., 7, 2] = SH_C2[3] * x
        g[..., 8, 0] = 2 * SH_C2[4] * x
        g[..., 8, 1] = -2 * SH_C2[4] * y
    return g


def degree_of(n_coeffs: int) -> int:
    deg = int(round(np.sqrt(n_coeffs))) - 1
    if sh_count(deg) != n_coeffs or deg > 2:
        raise ValueError(f"{n_coeffs} coefficients is not a supported SH layout")
    return deg


def eval_sh(sh_coeffs, view_dir):
    """Color in [0, 1] of SH coefficients (K, 3) (or batched (N, K, 3)) seen along ``view_dir``."""
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    b = sh_basis(view_dir, degree_of(sh_coeffs.shape[-2]))
    raw = np.einsum("...k,...kc->...c", b, sh_coeffs) + 0.5
    return np.clip(raw, 0.0, 1.0)


def rgb_to_sh0(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh0_to_rgb(sh0):
    return np.clip(np.asarray(sh0, dtype=np.float64) * SH_C0 + 0.5, 0.0, 1.0)


def _fibonacci_dirs(n: int):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def sh_rotation_matrix(R, degree: int):
    """Matrix D with D @ c giving coefficients whose color at dir d equals the original at R^T d.

    Bands do not mix, so D is block diagonal; each block is solved exactly by least
    squares over a direction set large enough to make the system overdetermined.
    """
    R = np.asarray(R, dtype=np.float64)
    K = sh_count(degree)
    D = np.eye(K)
    if degree == 0:
        return D
    dirs = _fibonacci_dirs(64)
    B = sh_basis(dirs, degree)
    B_rot = sh_basis(dirs @ R, degree)  # rows are basis(R^T d)
    for lo, hi in ((1, 4), (4, 9))[:degree]:
        blk, *_ = np.linalg.lstsq(B[:, lo:hi], B_rot[:, lo:hi], rcond=None)
        D[lo:hi, lo:hi] = blk
    return D


def rotate_sh(sh_coeffs, R):
    """Rotate (N, K, 3) SH coefficients by world rotation R."""
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    D = sh_rotation_matrix(R, degree_of(sh_coeffs.shape[-2]))
    return np.einsum("ij,njc->nic", D, sh_coeffs)
