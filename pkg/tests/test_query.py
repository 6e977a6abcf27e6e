import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from featsplat.codec import Codec
from featsplat.losses import cosine_similarity
from featsplat.query import (
    DegenerateQueryWarning, EmptyMaskWarning, QuerySet, TableEmbeddings, load_mask, pairwise_softmax,
    positive_embedding, relevancy_mask, render_similarity_map, save_mask, scores_from_decoded,
    similarity_score, similarity_scores,
)
from featsplat.raster import render_view
from featsplat.scene import GaussianScene
from featsplat.synthetic import front_camera, random_scene, two_cluster_scene

X, Y, Z = np.eye(3)
vec = arrays(np.float64, 4, elements=st.floats(-1, 1, allow_nan=False)).filter(lambda v: np.linalg.norm(v) > 1e-3)


def provider():
    return TableEmbeddings({"x": X, "y": Y, "z": Z, "-x": -X, "xy": (X + Y) / np.sqrt(2)})


def test_cosine_examples():
    v = np.array([0.3, -2.0, 1.0])
    assert cosine_similarity(v, v) == pytest.approx(1.0)
    assert cosine_similarity(v, -v) == pytest.approx(-1.0)
    assert cosine_similarity(X, Y) == 0.0


def test_positive_embedding_examples():
    p = provider()
    np.testing.assert_array_equal(positive_embedding(QuerySet(["y"]), p), Y)
    with pytest.warns(DegenerateQueryWarning):
        np.testing.assert_array_equal(positive_embedding(QuerySet(["x", "-x"]), p), np.zeros(3))
    np.testing.assert_array_equal(positive_embedding(QuerySet(["x", "x", "x"]), p), X)


def test_pairwise_softmax_examples():
    assert pairwise_softmax(0.3, 0.3) == 0.5
    assert pairwise_softmax(1.0, 0.0) == pytest.approx(np.e / (np.e + 1))
    both = [np.exp(0.5) / (np.exp(0.5) + np.exp(n)) for n in (0.9, 0.1)]
    assert scores_from_decoded(np.array([[1.0, 0.0]]), [1.0, 0.0], [])[0] == 1.0
    # psi(p, pos) = 0.5, psi(p, n1) = 0.9, psi(p, n2) = 0.1
    p = np.array([1.0, 0.0])
    unit = lambda c: np.array([c, np.sqrt(1 - c * c)])  # noqa: E731
    s = scores_from_decoded(p[None], unit(0.5), [unit(0.9), unit(0.1)])[0]
    assert s == pytest.approx(min(both), abs=1e-12)
    assert s == pytest.approx(both[0], abs=1e-12)


def test_scene_scores_examples():
    scene = random_scene(20, latent_dim=3, seed=0)
    p = provider()
    codec = Codec.identity(3)
    scene.latents[:] = X
    m = relevancy_mask(scene, QuerySet(["x"], ["y"]), p, codec)
    np.testing.assert_array_equal(m.indices, np.arange(20))
    np.testing.assert_allclose(m.scores, np.e / (np.e + 1))
    scene.latents[:] = Y
    with pytest.warns(EmptyMaskWarning):
        m = relevancy_mask(scene, QuerySet(["x"], ["y"]), p, codec)
    assert m.empty
    np.testing.assert_allclose(m.scores, 1 / (np.e + 1))


def test_threshold_is_strict():
    scene = random_scene(5, latent_dim=3, seed=0)
    scene.latents[:] = Z
    with pytest.warns(EmptyMaskWarning):
        m = relevancy_mask(scene, QuerySet(["x"], ["y"], threshold=0.5), provider(), Codec.identity(3))
    np.testing.assert_array_equal(m.scores, 0.5)
    assert m.empty


def test_no_negatives_uses_rescaled_cosine():
    P = np.array([[1.0, 0, 0], [0, 1.0, 0], [-1.0, 0, 0]])
    np.testing.assert_allclose(scores_from_decoded(P, X, []), [1.0, 0.5, 0.0])


def test_similarity_score_matches_batch():
    scene = random_scene(6, latent_dim=3, seed=2)
    q = QuerySet(["xy"], ["z"])
    codec = Codec.identity(3)
    batch = similarity_scores(scene, q, provider(), codec)
    single = [similarity_score(scene.latents[i], q, provider(), codec) for i in range(6)]
    np.testing.assert_allclose(batch, single, atol=1e-15)


def test_errors():
    with pytest.raises(KeyError):
        provider()("unknown")
    with pytest.raises(ValueError):
        QuerySet([])
    with pytest.raises(ValueError):
        similarity_scores(random_scene(3, latent_dim=4), QuerySet(["x"]), provider(), Codec.identity(3))


@settings(max_examples=50, deadline=None)
@given(vec, vec, vec, st.floats(0.01, 100))
def test_score_invariant_to_positive_scale(p, pos, neg, c):
    a = scores_from_decoded(p[None], pos, [neg])
    b = scores_from_decoded(c * p[None], pos, [neg])
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(vec, vec, vec, vec)
def test_adding_a_negative_never_raises_score(p, pos, n1, n2):
    assert scores_from_decoded(p[None], pos, [n1, n2])[0] <= scores_from_decoded(p[None], pos, [n1])[0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_mask_monotone_in_threshold_and_negative_order(seed, t1, t2):
    rng = np.random.default_rng(seed)
    scene = random_scene(40, latent_dim=3, seed=seed)
    table = {k: rng.normal(size=3) for k in ("a", "b", "c", "d")}
    p = TableEmbeddings(table)
    codec = Codec.identity(3)
    lo, hi = sorted((t1, t2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m_hi = relevancy_mask(scene, QuerySet(["a"], ["b", "c", "d"], hi), p, codec)
        m_lo = relevancy_mask(scene, QuerySet(["a"], ["b", "c", "d"], lo), p, codec)
        m_perm = relevancy_mask(scene, QuerySet(["a"], ["d", "b", "c"], hi), p, codec)
    assert set(m_hi.indices) <= set(m_lo.indices)
    np.testing.assert_array_equal(m_hi.indices, m_perm.indices)


def test_similarity_map_examples():
    cam = front_camera(16)
    q = QuerySet(["x"])
    assert not render_similarity_map(GaussianScene.empty(3), cam, q, provider(), Codec.identity(3)).any()
    scene = random_scene(15, latent_dim=3, seed=4)
    m = render_similarity_map(scene, cam, q, provider(), Codec.identity(3), scores=np.full(15, 0.3))
    np.testing.assert_allclose(m, 0.3 * render_view(scene, cam).alpha, atol=1e-12)


def test_similarity_map_hot_over_matching_cluster():
    scene, labels = two_cluster_scene(40)
    emb = np.eye(3)
    scene.latents = emb[labels]
    p = TableEmbeddings({"a": emb[0], "b": emb[1]})
    from featsplat.scene import CameraModel
    cam = CameraModel.look_at([0, -3, 0], [0, 0, 0], width=48, height=32, fov_deg=50)
    m = render_similarity_map(scene, cam, QuerySet(["a"], ["b"]), p, Codec.identity(3))[..., 0]
    left, right = m[:, :24], m[:, 24:]
    # cluster A sits at -x, which is image-left for this camera
    assert left.max() > 0.7 and right.max() < 0.3


def test_embedding_tsv_and_npz_round_trip(tmp_path):
    p = provider()
    p.to_tsv(tmp_path / "e.tsv")
    back = TableEmbeddings.from_tsv(tmp_path / "e.tsv")
    assert back.table.keys() == p.table.keys()
    for k in p.table:
        np.testing.assert_array_equal(back(k), p(k))
    np.savez(tmp_path / "e.npz", **p.table)
    np.testing.assert_array_equal(TableEmbeddings.from_npz(tmp_path / "e.npz")("xy"), p("xy"))


def test_mask_file_round_trip(tmp_path):
    idx = np.array([0, 5, 7, 4_000_000_000])
    save_mask(idx, tmp_path / "m.bin")
    np.testing.assert_array_equal(load_mask(tmp_path / "m.bin"), idx)
    (tmp_path / "bad.bin").write_bytes((tmp_path / "m.bin").read_bytes()[:-2])
    with pytest.raises(ValueError):
        load_mask(tmp_path / "bad.bin")
