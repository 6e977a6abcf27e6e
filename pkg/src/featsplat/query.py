"""Open-vocabulary relevancy of Gaussians from positive/negative text-query embeddings."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import Codec
from .losses import cosine_similarity
from .raster import RasterSettings, project_scene, rasterize


class DegenerateQueryWarning(UserWarning):
    pass


class EmptyMaskWarning(UserWarning):
    pass


class EmbeddingProvider:
    """Maps a text string to a C-vector."""

    dim: int

    def __call__(self, text: str) -> np.ndarray:
        raise NotImplementedError


@dataclass
class TableEmbeddings(EmbeddingProvider):
    """Exact-match lookup table; unknown tokens raise KeyError."""

    table: dict

    def __post_init__(self):
        self.table = {k: np.asarray(v, dtype=np.float64).ravel() for k, v in self.table.items()}
        dims = {len(v) for v in self.table.values()}
        if len(dims) > 1:
            raise ValueError(f"embedding table has mixed dimensions {sorted(dims)}")
        for k, v in self.table.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"embedding for {k!r} has non-finite entries")
        self.dim = dims.pop() if dims else 0

    def __call__(self, text: str) -> np.ndarray:
        try:
            return self.table[text].copy()
        except KeyError:
            raise KeyError(f"no embedding for query {text!r}") from None

    @classmethod
    def from_tsv(cls, path) -> "TableEmbeddings":
        """One record per line: ``token<TAB>f1 f2 ... fC`` (floats may also be tab separated)."""
        table = {}
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            token, _, rest = line.partition("\t")
            if not rest:
                raise ValueError(f"{path}:{n}: expected token<TAB>values")
            table[token] = [float(x) for x in rest.replace("\t", " ").split()]
        return cls(table)

    @classmethod
    def from_npz(cls, path) -> "TableEmbeddings":
        """Import precomputed embeddings stored as one array per token."""
        with np.load(path) as data:
            return cls({k: data[k] for k in data.files})

    def to_tsv(self, path) -> None:
        with open(path, "w") as fh:
            for k, v in self.table.items():
                fh.write(k + "\t" + " ".join(repr(float(x)) for x in v) + "\n")


@dataclass
class QuerySet:
    positives: list
    negatives: list = field(default_factory=list)
    threshold: float = 0.5

    def __post_init__(self):
        if not self.positives:
            raise ValueError("at least one positive query is required")
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")


def positive_embedding(queries: QuerySet, provider) -> np.ndarray:
    """Mean embedding of the positive queries; warns when it cancels to zero."""
    v = np.mean([provider(q) for q in queries.positives], axis=0)
    if np.linalg.norm(v) < 1e-12:
        warnings.warn("positive queries average to the zero vector", DegenerateQueryWarning, stacklevel=2)
    return v


def pairwise_softmax(psi_pos, psi_neg):
    """exp(a) / (exp(a) + exp(b)), computed stably."""
    return 1.0 / (1.0 + np.exp(np.asarray(psi_neg) - np.asarray(psi_pos)))


def _cosines(P, v):
    """Row-wise cosine of P (N x C) with v; 0 where either side is zero."""
    pn = np.linalg.norm(P, axis=1)
    vn = np.linalg.norm(v)
    den = pn * vn
    return np.where(den > 0, (P @ v) / np.where(den > 0, den, 1.0), 0.0).clip(-1.0, 1.0)


def scores_from_decoded(P, pos, negs) -> np.ndarray:
    """Relevancy of decoded embeddings P (N x C): min over negatives of the pairwise softmax."""
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    pos = np.asarray(pos, dtype=np.float64)
    if P.shape[1] != len(pos):
        raise ValueError(f"decoded dim {P.shape[1]} does not match query dim {len(pos)}")
    psi_p = _cosines(P, pos)
    if len(negs) == 0:
        return (psi_p + 1.0) / 2.0
    out = np.ones(len(P))
    for n in negs:
        out = np.minimum(out, pairwise_softmax(psi_p, _cosines(P, np.asarray(n, dtype=np.float64))))
    return out


def _query_vectors(queries: QuerySet, provider):
    return positive_embedding(queries, provider), [provider(q) for q in queries.negatives]


def similarity_score(latent, queries: QuerySet, provider, codec: Codec) -> float:
    pos, negs = _query_vectors(queries, provider)
    return float(scores_from_decoded(codec.decode(np.asarray(latent, dtype=np.float64)[None]), pos, negs)[0])


def similarity_scores(scene, queries: QuerySet, provider, codec: Codec) -> np.ndarray:
    if codec.latent_dim != scene.latent_dim:
        raise ValueError(f"codec latent_dim {codec.latent_dim} != scene latent_dim {scene.latent_dim}")
    pos, negs = _query_vectors(queries, provider)
    return scores_from_decoded(codec.decode(scene.latents.astype(np.float64)), pos, negs)


@dataclass
class RelevancyMask:
    indices: np.ndarray
    scores: np.ndarray

    @property
    def empty(self) -> bool:
        return len(self.indices) == 0


def relevancy_mask(scene, queries: QuerySet, provider, codec: Codec, scores=None) -> RelevancyMask:
    """Indices of Gaussians whose score is strictly above the threshold."""
    s = similarity_scores(scene, queries, provider, codec) if scores is None else np.asarray(scores)
    idx = np.flatnonzero(s > queries.threshold).astype(np.int64)
    if len(idx) == 0:
        warnings.warn("relevancy mask is empty", EmptyMaskWarning, stacklevel=2)
    return RelevancyMask(idx, s)


def render_similarity_map(scene, cam, queries: QuerySet, provider, codec: Codec,
                          settings: RasterSettings | None = None, scores=None) -> np.ndarray:
    """Per-Gaussian scores composited with the render weights (H x W x 1, in [0, 1])."""
    if len(scene) == 0:
        return np.zeros((cam.height, cam.width, 1))
    s = similarity_scores(scene, queries, provider, codec) if scores is None else np.asarray(scores)
    settings = settings or RasterSettings()
    proj = project_scene(scene, cam, settings)
    out, _, _ = rasterize(proj, cam.height, cam.width, settings, feats=s[:, None])
    return np.clip(out, 0.0, 1.0)


def save_mask(indices, path) -> None:
    idx = np.asarray(indices, dtype="<u4")
    Path(path).write_bytes(struct.pack("<I", len(idx)) + idx.tobytes())


def load_mask(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ValueError(f"{path}: truncated mask file")
    (n,) = struct.unpack_from("<I", data)
    if len(data) != 4 + 4 * n:
        raise ValueError(f"{path}: expected {n} indices, file holds {(len(data) - 4) // 4}")
    return np.frombuffer(data, dtype="<u4", offset=4).astype(np.int64)
