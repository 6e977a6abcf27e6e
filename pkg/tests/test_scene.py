import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from featsplat.scene import (
    CameraModel, GaussianPrimitive, GaussianScene, InvalidParameterError, SceneFormatError,
    covariance_from_params, export_ply, load_scene, load_scene_bytes, normalize_quat, quat_to_rotmat,
    read_ply, record_floats, rotmat_to_quat, save_scene, save_scene_bytes,
)
from featsplat.synthetic import random_scene

finite = st.floats(-3, 3, allow_nan=False)


def test_covariance_identity():
    np.testing.assert_array_equal(covariance_from_params([0, 0, 0], [1, 0, 0, 0]), np.eye(3))


def test_covariance_diagonal_scaling():
    np.testing.assert_allclose(covariance_from_params([np.log(2), 0, 0], [1, 0, 0, 0]), np.diag([4.0, 1, 1]),
                               atol=1e-12)


def test_covariance_rotated_90_about_z():
    # R = [[0,-1,0],[1,0,0],[0,0,1]], S S^T = diag(4,1,1): R diag R^T swaps the x and y variances
    q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
    np.testing.assert_allclose(covariance_from_params([np.log(2), 0, 0], q), np.diag([1.0, 4, 1]), atol=1e-12)


def test_covariance_zero_quaternion_rejected():
    with pytest.raises(InvalidParameterError):
        covariance_from_params([0, 0, 0], [0, 0, 0, 0])


def test_covariance_psd_on_1000_draws(rng):
    ls = rng.uniform(-4, 2, (1000, 3))
    q = rng.normal(size=(1000, 4))
    covs = covariance_from_params(ls, q)
    for c, s in zip(covs, ls):
        np.linalg.cholesky(c)
        assert np.abs(c - c.T).max() <= 1e-12 * max(1.0, np.abs(c).max())
        np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(c)), np.sort(np.exp(2 * s)), rtol=1e-9)


@given(st.tuples(finite, finite, finite), st.tuples(finite, finite, finite, finite))
def test_covariance_symmetric_with_scaled_eigenvalues(ls, q):
    if np.linalg.norm(q) < 1e-3:
        return
    c = covariance_from_params(ls, q)
    assert np.abs(c - c.T).max() <= 1e-12 * max(1.0, np.abs(c).max())
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(c)), np.sort(np.exp(2 * np.array(ls))), rtol=1e-8)


def test_renormalize_unit_quaternion_is_noop(rng):
    q = rng.normal(size=(100, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    np.testing.assert_allclose(normalize_quat(q), q, atol=1e-12)


def test_quaternion_matrix_round_trip(rng):
    for q in rng.normal(size=(50, 4)):
        q = q / np.linalg.norm(q)
        q2 = rotmat_to_quat(quat_to_rotmat(q))
        assert min(np.abs(q2 - q).max(), np.abs(q2 + q).max()) < 1e-12


def test_sigmoid_fields_in_open_interval():
    s = random_scene(50, seed=3)
    assert np.all((s.opacities > 0) & (s.opacities < 1))
    assert np.all((s.affordances > 0) & (s.affordances < 1))


def test_extent_bounds_means():
    s = random_scene(40, seed=2)
    d = np.linalg.norm(s.means - s.means.mean(axis=0), axis=1)
    assert s.extent >= d.max() - 1e-12


def test_empty_scene_round_trip(tmp_path):
    s = GaussianScene.empty(latent_dim=3)
    save_scene(s, tmp_path / "e.splat")
    data = (tmp_path / "e.splat").read_bytes()
    assert len(data) == 8 + 4 * 4
    assert load_scene(tmp_path / "e.splat").equals(s)


def test_single_gaussian_round_trip_all_floats(tmp_path):
    s = random_scene(1, latent_dim=3, sh_degree=0, seed=5).quantized()
    save_scene(s, tmp_path / "one.splat")
    back = load_scene(tmp_path / "one.splat")
    assert back.equals(s)
    # record layout: mean 3, log_scale 3, quat 4, opacity 1, sh 3K, latent l, affordance 1
    assert record_floats(3, 0) == 3 + 3 + 4 + 1 + 3 + 3 + 1


def test_large_scene_hash_round_trip():
    s = random_scene(10_000, seed=9)
    data = save_scene_bytes(s)
    again = save_scene_bytes(load_scene_bytes(data))
    assert hashlib.sha256(data).hexdigest() == hashlib.sha256(again).hexdigest()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 30), st.integers(1, 8), st.integers(0, 2), st.integers(0, 10_000))
def test_round_trip_is_identity(n, l, deg, seed):
    s = random_scene(n, latent_dim=l, sh_degree=deg, seed=seed).quantized()
    back = load_scene_bytes(save_scene_bytes(s))
    assert back.equals(s)
    assert back.extent == s.extent


def test_header_layout():
    s = random_scene(2, latent_dim=5, sh_degree=2, seed=0)
    data = save_scene_bytes(s)
    magic, n, l, deg, ext = struct.unpack_from("<8sIIIf", data)
    assert (magic, n, l, deg) == (b"SPLATF1\0", 2, 5, 2)
    assert ext == np.float32(s.extent)
    assert len(data) == 24 + 2 * 4 * record_floats(5, 2)


def test_bad_magic_reports_offset():
    data = bytearray(save_scene_bytes(random_scene(2, seed=0)))
    data[:8] = b"NOTSPLAT"
    with pytest.raises(SceneFormatError) as ei:
        load_scene_bytes(bytes(data))
    assert ei.value.offset == 0


def test_truncated_record_reports_offset():
    s = random_scene(3, seed=0)
    data = save_scene_bytes(s)
    rec = 4 * record_floats(3, 1)
    with pytest.raises(SceneFormatError) as ei:
        load_scene_bytes(data[:-5])
    assert ei.value.offset == 24 + 2 * rec


def test_latent_dim_mismatch_with_header():
    data = bytearray(save_scene_bytes(random_scene(3, latent_dim=3, seed=0)))
    struct.pack_into("<I", data, 12, 4)
    with pytest.raises(SceneFormatError, match="latent_dim"):
        load_scene_bytes(bytes(data))


def test_primitive_view_matches_arrays():
    s = random_scene(4, seed=1)
    g = s[2]
    assert isinstance(g, GaussianPrimitive)
    np.testing.assert_array_equal(g.mean, s.means[2])
    assert g.opacity == pytest.approx(s.opacities[2])
    rebuilt = GaussianScene.from_primitives(s.gaussians, latent_dim=3, sh_degree=1, extent=s.extent)
    assert rebuilt.equals(s)


def test_ply_round_trip(tmp_path):
    pts = np.array([[0, 0, 0], [1, 2, 3.5]])
    cols = np.array([[1, 0, 0], [0, 0.5, 1]])
    export_ply(tmp_path / "p.ply", pts, cols)
    p, c, _ = read_ply(tmp_path / "p.ply")
    np.testing.assert_allclose(p, pts)
    np.testing.assert_allclose(c, np.round(cols * 255) / 255)


@pytest.mark.parametrize("kwargs", [
    dict(fx=0, fy=1, cx=1, cy=1, width=4, height=4),
    dict(fx=1, fy=1, cx=4, cy=1, width=4, height=4),
    dict(fx=1, fy=1, cx=1, cy=1, width=4, height=4, R=np.diag([1, 1, 1.1])),
])
def test_camera_validation(kwargs):
    with pytest.raises(InvalidParameterError):
        CameraModel(**kwargs)


def test_camera_look_at_centers_target():
    cam = CameraModel.look_at([2, 1, 3], [0, 0, 0], width=32, height=24)
    p = cam.R @ np.zeros(3) + cam.t
    assert p[0] == pytest.approx(0, abs=1e-12) and p[1] == pytest.approx(0, abs=1e-12) and p[2] > 0
    np.testing.assert_allclose(cam.center, [2, 1, 3])
