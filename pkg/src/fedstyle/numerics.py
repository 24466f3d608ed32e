"""Small numeric kernels shared by every other module.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order. All
public functions return fresh arrays and never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DTYPE = np.float64

# Stream tags keep the purposes of seeded draws apart.
STREAM_DATA = 1
STREAM_PARTITION = 2
STREAM_ENCODER = 3
STREAM_INIT = 4
STREAM_SAMPLING = 5
STREAM_SHUFFLE = 6


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream keyed by a master seed and a stream id.

    The stream id is a tuple of non-negative integers, e.g.
    ``(STREAM_SHUFFLE, client_id, round)``. Equal keys give equal draws on
    every platform (PCG64 seeded through ``SeedSequence``).
    """

    seed: int
    stream: tuple[int, ...] = ()

    def generator(self) -> np.random.Generator:
        entropy = [int(self.seed) & 0xFFFFFFFFFFFFFFFF]
        entropy.extend(int(k) & 0xFFFFFFFFFFFFFFFF for k in self.stream)
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream + tuple(keys))


def rng(seed: int, *keys: int) -> np.random.Generator:
    return RngStream(seed, tuple(keys)).generator()


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=DTYPE).ravel()
    b = np.asarray(b, dtype=DTYPE).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def channel_stats(features) -> tuple[np.ndarray, np.ndarray]:
    """Pooled per-channel mean and population std of an ``N x C x H x W`` tensor."""
    x = np.asarray(features, dtype=DTYPE)
    if x.ndim != 4:
        raise ValueError(f"expected N x C x H x W, got shape {x.shape}")
    if x.shape[0] * x.shape[2] * x.shape[3] == 0 or x.shape[1] == 0:
        raise ValueError("channel_stats of an empty tensor")
    per_channel = np.moveaxis(x, 1, 0).reshape(x.shape[1], -1)
    mu = per_channel.mean(axis=1)
    sigma = np.sqrt(np.mean((per_channel - mu[:, None]) ** 2, axis=1))
    return mu, sigma


def instance_stats(features) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample channel statistics; both outputs have shape ``N x C``."""
    x = np.asarray(features, dtype=DTYPE)
    if x.ndim != 4:
        raise ValueError(f"expected N x C x H x W, got shape {x.shape}")
    flat = x.reshape(x.shape[0], x.shape[1], -1)
    if flat.shape[2] == 0:
        raise ValueError("instance_stats of an empty spatial map")
    mu = flat.mean(axis=2)
    sigma = np.sqrt(np.mean((flat - mu[:, :, None]) ** 2, axis=2))
    return mu, sigma


def coordwise_median(vectors: Sequence) -> np.ndarray:
    if len(vectors) == 0:
        raise ValueError("median of an empty list")
    lengths = {np.asarray(v).size for v in vectors}
    if len(lengths) != 1:
        raise ValueError(f"ragged input lengths: {sorted(lengths)}")
    stacked = np.stack([np.asarray(v, dtype=DTYPE).ravel() for v in vectors])
    # np.median averages the two middle values for even counts
    return np.median(stacked, axis=0)


def check_finite(x, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
