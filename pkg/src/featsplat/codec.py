"""Per-pixel MLP autoencoder between C-dimensional embeddings and the l-dimensional latent."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import LossWeights
from .optim import Adam

log = logging.getLogger(__name__)

CODEC_MAGIC = b"CODECF1\0"


class CodecFormatError(ValueError):
    pass


@dataclass
class FeatureImage:
    data: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"feature image must be H x W x C, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"feature image {self.source!r} has non-finite entries")

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def _mlp_forward(layers, x, keep=False):
    acts = [x]
    h = x
    for i, (W, b) in enumerate(layers):
        h = h @ W + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return (h, acts) if keep else h


def _mlp_backward(layers, acts, g):
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        if i < len(layers) - 1:
            g = g * (acts[i + 1] > 0)
        grads[i] = (acts[i].T @ g, g.sum(axis=0))
        g = g @ W.T
    return grads, g


@dataclass
class Codec:
    """Encoder C -> hidden -> l and mirrored decoder; ReLU on hidden layers, identity outputs.

    Weights are stored (in, out) so a layer computes ``x @ W + b``.
    """

    encoder: list = field(default_factory=list)
    decoder: list = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.encoder[0][0].shape[0]

    @property
    def latent_dim(self) -> int:
        return self.encoder[-1][0].shape[1]

    @classmethod
    def init(cls, input_dim: int, latent_dim: int, hidden=(128, 64), seed: int = 0) -> "Codec":
        if latent_dim > input_dim:
            raise ValueError("latent_dim must not exceed input_dim")
        rng = np.random.default_rng(seed)

        def stack(dims):
            return [(rng.normal(0, np.sqrt(2.0 / a), (a, b)), np.zeros(b)) for a, b in zip(dims[:-1], dims[1:])]

        enc = stack([input_dim, *hidden, latent_dim])
        dec = stack([latent_dim, *reversed(hidden), input_dim])
        return cls(enc, dec)

    @classmethod
    def identity(cls, dim: int, depth: int = 3) -> "Codec":
        """Identity weights through every layer; exact on nonnegative inputs."""
        layers = [(np.eye(dim), np.zeros(dim)) for _ in range(depth)]
        return cls([(W.copy(), b.copy()) for W, b in layers], [(W.copy(), b.copy()) for W, b in layers])

    def _apply(self, layers, x, in_dim):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != in_dim:
            raise ValueError(f"expected trailing dimension {in_dim}, got {x.shape[-1]}")
        flat = x.reshape(-1, in_dim)
        out = _mlp_forward(layers, flat)
        return out.reshape(x.shape[:-1] + (out.shape[-1],))

    def encode(self, f):
        return self._apply(self.encoder, f, self.input_dim)

    def decode(self, z):
        return self._apply(self.decoder, z, self.latent_dim)

    def __call__(self, f):
        return self.encode(f)

    def reconstruct(self, f):
        return self.decode(self.encode(f))

    def params(self) -> list[np.ndarray]:
        return [a for W, b in self.encoder + self.decoder for a in (W, b)]

    def set_params(self, flat) -> None:
        it = iter(flat)
        self.encoder = [(next(it), next(it)) for _ in self.encoder]
        self.decoder = [(next(it), next(it)) for _ in self.decoder]

    def copy(self) -> "Codec":
        return Codec([(W.copy(), b.copy()) for W, b in self.encoder], [(W.copy(), b.copy()) for W, b in self.decoder])

    def loss_and_grad(self, X, weights: LossWeights):
        """L_g on pixel vectors X (N x C): kappa_g * MSE + (1 - mean cosine over nonzero rows)."""
        z, enc_acts = _mlp_forward(self.encoder, X, keep=True)
        y, dec_acts = _mlp_forward(self.decoder, z, keep=True)
        diff = y - X
        mse = np.mean(diff * diff)
        xn = np.linalg.norm(X, axis=1)
        yn = np.linalg.norm(y, axis=1)
        mask = (xn > 0) & (yn > 0)
        n = max(int(mask.sum()), 1)
        dot = np.sum(X * y, axis=1)
        xs = np.where(mask, xn, 1.0)
        ys = np.where(mask, yn, 1.0)
        cos = np.where(mask, dot / (xs * ys), 0.0)
        loss = weights.kappa_g * mse + (1.0 - cos.sum() / n if mask.any() else 0.0)
        g = weights.kappa_g * 2 * diff / diff.size
        g_cos = (X / (xs * ys)[:, None] - (dot / (xs * ys ** 3))[:, None] * y) * mask[:, None] / n
        g = g - g_cos
        dec_grads, gz = _mlp_backward(self.decoder, dec_acts, g)
        enc_grads, _ = _mlp_backward(self.encoder, enc_acts, gz)
        flat = [a for W, b in enc_grads + dec_grads for a in (W, b)]
        return float(loss), flat

    def round_to_f32(self) -> None:
        self.set_params([p.astype(np.float32).astype(np.float64) for p in self.params()])


@dataclass
class CodecTrainResult:
    codec: Codec
    losses: list
    best: list


def _pixel_matrix(dataset, max_pixels: int, rng):
    X = np.concatenate([fi.data.reshape(-1, fi.channels) for fi in dataset], axis=0)
    if len(X) > max_pixels:
        X = X[np.sort(rng.choice(len(X), max_pixels, replace=False))]
    return X


def train_codec(dataset, latent_dim: int = 3, weights: LossWeights | None = None, epochs: int = 1000,
                lr: float = 1e-3, hidden=(128, 64), seed: int = 0, max_pixels: int = 8192,
                final_lr_ratio: float = 0.01) -> CodecTrainResult:
    """Fit the autoencoder with full-batch Adam on (a seeded subsample of) all pixel vectors.

    The learning rate decays exponentially to ``lr * final_lr_ratio`` over the run.
    """
    if not dataset:
        raise ValueError("empty feature dataset")
    weights = weights or LossWeights()
    dims = {fi.channels for fi in dataset}
    if len(dims) != 1:
        raise ValueError(f"feature images disagree on channel count: {sorted(dims)}")
    rng = np.random.default_rng(seed)
    X = _pixel_matrix(dataset, max_pixels, rng)
    codec = Codec.init(X.shape[1], latent_dim, hidden, seed=seed)
    names = [str(i) for i in range(len(codec.params()))]
    opt = Adam({k: lr for k in names})
    losses, best = [], []
    decay = final_lr_ratio ** (1.0 / max(epochs - 1, 1))
    for epoch in range(epochs):
        for k in names:
            opt.lrs[k] = lr * decay ** epoch
        loss, grads = codec.loss_and_grad(X, weights)
        if not np.isfinite(loss):
            raise FloatingPointError(f"codec loss became non-finite at epoch {epoch}")
        losses.append(loss)
        best.append(min(loss, best[-1]) if best else loss)
        params = dict(zip(names, codec.params()))
        codec.set_params(list(opt.step(params, dict(zip(names, grads))).values()))
    codec.round_to_f32()
    log.info("codec trained: final loss %.3e", losses[-1])
    return CodecTrainResult(codec, losses, best)


def reconstruction_cosine(codec: Codec, dataset) -> float:
    """Mean cosine between nonzero inputs and their reconstructions."""
    X = np.concatenate([fi.data.reshape(-1, fi.channels) for fi in dataset], axis=0)
    X = X[np.linalg.norm(X, axis=1) > 0]
    Y = codec.reconstruct(X)
    num = np.sum(X * Y, axis=1)
    den = np.linalg.norm(X, axis=1) * np.linalg.norm(Y, axis=1)
    return float(np.mean(np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)))


def save_codec(codec: Codec, path) -> None:
    enc_dims = [codec.encoder[0][0].shape[0]] + [W.shape[1] for W, _ in codec.encoder]
    dec_dims = [codec.decoder[0][0].shape[0]] + [W.shape[1] for W, _ in codec.decoder]
    head = CODEC_MAGIC + struct.pack("<II", len(codec.encoder), len(codec.decoder))
    head += struct.pack(f"<{len(enc_dims) + len(dec_dims)}I", *enc_dims, *dec_dims)
    body = b"".join(np.asarray(p, dtype="<f4").tobytes() for p in codec.params())
    Path(path).write_bytes(head + body)


def load_codec(path) -> Codec:
    data = Path(path).read_bytes()
    if data[:8] != CODEC_MAGIC:
        raise CodecFormatError(f"{path}: bad magic {data[:8]!r}")
    try:
        ne, nd = struct.unpack_from("<II", data, 8)
        dims = struct.unpack_from(f"<{ne + nd + 2}I", data, 16)
    except struct.error as exc:
        raise CodecFormatError(f"{path}: truncated header") from exc
    enc_dims, dec_dims = dims[:ne + 1], dims[ne + 1:]
    off = 16 + 4 * len(dims)

    def read(shape):
        nonlocal off
        n = int(np.prod(shape))
        if off + 4 * n > len(data):
            raise CodecFormatError(f"{path}: truncated weights at byte {off}")
        a = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 4 * n
        return a

    enc = [(read((a, b)), read((b,))) for a, b in zip(enc_dims[:-1], enc_dims[1:])]
    dec = [(read((a, b)), read((b,))) for a, b in zip(dec_dims[:-1], dec_dims[1:])]
    if off != len(data):
        raise CodecFormatError(f"{path}: {len(data) - off} trailing bytes")
    return Codec(enc, dec)
