"""Frozen convolutional style encoder and the trainable MLP head.

The feature extractor is ``head o encoder``: the encoder is a fixed, seeded
two-layer strided convolution stem shared by every participant, and the head
is ``dense -> relu -> dense`` producing the embedding ``z`` followed by a
linear classifier producing logits. Only the head is trained; its gradients
are written out by hand in :func:`backward`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BadMagicError, ManifestMismatchError, TruncatedError, VersionError
from .numerics import DTYPE, STREAM_ENCODER, STREAM_INIT, check_finite, rng

PARAMS_MAGIC = b"FDGM"
PARAMS_VERSION = 1

# output scale of the stem, fixed on a probe batch of uniform random images
STEM_TARGET_RMS = 0.2
STEM_PROBE = (64, 16, 16)


def _conv3x3_s2(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 convolution, stride 2, zero padding 1 on an ``N x Cin x H x W`` batch."""
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    windows = windows[:, :, ::2, ::2]  # N, Cin, H/2, W/2, 3, 3
    out = np.einsum("nchwij,ocij->nohw", windows, weight, optimize=True)
    return out + bias[None, :, None, None]


@dataclass(frozen=True)
class StyleEncoder:
    """Seeded frozen stem: two ``conv3x3/s2 + relu`` layers.

    After He-normal initialization the second layer is rescaled so the output
    RMS on a seeded probe of uniform images is ``target_rms``. The relu makes
    this a pure scale change of the features.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def create(
        cls, seed: int, channels: int = 16, in_channels: int = 3, target_rms: float | None = STEM_TARGET_RMS
    ) -> "StyleEncoder":
        g = rng(seed, STREAM_ENCODER)
        hidden = channels
        w1 = g.normal(0.0, np.sqrt(2.0 / (in_channels * 9)), size=(hidden, in_channels, 3, 3))
        b1 = g.uniform(-0.1, 0.1, size=hidden)
        w2 = g.normal(0.0, np.sqrt(2.0 / (hidden * 9)), size=(channels, hidden, 3, 3))
        b2 = g.uniform(-0.1, 0.1, size=channels)
        if target_rms is not None:
            n, h, w = STEM_PROBE
            probe = rng(seed, STREAM_ENCODER, 1).random((n, in_channels, h, w))
            hid = np.maximum(_conv3x3_s2(probe, w1, b1), 0.0)
            rms = float(np.sqrt(np.mean(np.maximum(_conv3x3_s2(hid, w2, b2), 0.0) ** 2)))
            if rms == 0.0:
                raise ValueError(f"stem for seed {seed} is dead on the probe batch")
            w2, b2 = w2 * (target_rms / rms), b2 * (target_rms / rms)
        arrays = [np.ascontiguousarray(a, dtype=DTYPE) for a in (w1, b1, w2, b2)]
        for a in arrays:
            a.setflags(write=False)
        return cls(*arrays)

    @property
    def channels(self) -> int:
        return self.w2.shape[0]

    def output_shape(self, height: int, width: int) -> tuple[int, int, int]:
        return self.channels, height // 4, width // 4


def encoder_forward(enc: StyleEncoder, images) -> np.ndarray:
    """Encode one ``3 x H x W`` image or a batch ``N x 3 x H x W``."""
    x = np.asarray(images, dtype=DTYPE)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != enc.w1.shape[1]:
        raise ValueError(f"expected images with {enc.w1.shape[1]} channels, got shape {x.shape}")
    if x.shape[2] % 4 or x.shape[3] % 4 or x.shape[2] == 0 or x.shape[3] == 0:
        raise ValueError(f"spatial dims must be positive multiples of 4, got {x.shape[2:]}")
    h = np.maximum(_conv3x3_s2(x, enc.w1, enc.b1), 0.0)
    out = np.maximum(_conv3x3_s2(h, enc.w2, enc.b2), 0.0)
    return out[0] if single else out


@dataclass(frozen=True)
class ModelParams:
    """Flat trainable parameters plus the layer shape manifest.

    Layer order: dense1 weight/bias, dense2 weight/bias, classifier weight/bias.
    Weights are stored ``out x in``.
    """

    flat: np.ndarray
    shapes: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        expected = sum(int(np.prod(s)) for s in self.shapes)
        if self.flat.ndim != 1 or self.flat.size != expected:
            raise ManifestMismatchError(
                f"flat length {self.flat.size} does not match manifest total {expected}"
            )

    @property
    def input_dim(self) -> int:
        return self.shapes[0][1]

    @property
    def embed_dim(self) -> int:
        return self.shapes[2][0]

    @property
    def num_classes(self) -> int:
        return self.shapes[4][0]

    def unpack(self) -> list[np.ndarray]:
        out, offset = [], 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            out.append(self.flat[offset : offset + size].reshape(shape))
            offset += size
        return out

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        return ModelParams(np.asarray(flat, dtype=DTYPE), self.shapes)


def head_shapes(input_dim: int, hidden: int, embed: int, classes: int) -> tuple[tuple[int, ...], ...]:
    return (
        (hidden, input_dim),
        (hidden,),
        (embed, hidden),
        (embed,),
        (classes, embed),
        (classes,),
    )


def init_params(input_dim: int, hidden: int = 128, embed: int = 64, classes: int = 7, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights and zero biases drawn from the round-0 stream."""
    shapes = head_shapes(input_dim, hidden, embed, classes)
    g = rng(seed, STREAM_INIT, 0)
    parts = []
    for shape in shapes:
        if len(shape) == 2:
            fan_out, fan_in = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            parts.append(g.uniform(-limit, limit, size=shape).ravel())
        else:
            parts.append(np.zeros(shape, dtype=DTYPE))
    return ModelParams(np.concatenate(parts).astype(DTYPE), shapes)


def zeros_like(params: ModelParams) -> ModelParams:
    return params.with_flat(np.zeros_like(params.flat))


def _flatten_features(params: ModelParams, features) -> np.ndarray:
    x = np.asarray(features, dtype=DTYPE)
    batch = x.reshape(x.shape[0], -1) if x.ndim == 4 else x.reshape(1, -1)
    if batch.shape[1] != params.input_dim:
        raise ManifestMismatchError(
            f"feature size {batch.shape[1]} does not match manifest input {params.input_dim}"
        )
    return batch


def head_forward(params: ModelParams, features) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(z, logits)``; batched if ``features`` is ``N x C x H x W``."""
    x = _flatten_features(params, features)
    w1, b1, w2, b2, w3, b3 = params.unpack()
    a1 = np.maximum(x @ w1.T + b1, 0.0)
    z = a1 @ w2.T + b2
    logits = z @ w3.T + b3
    if np.asarray(features).ndim != 4:
        return z[0], logits[0]
    return z, logits


def backward(params: ModelParams, features, grad_z, grad_logits) -> np.ndarray:
    """Flat parameter gradient of ``sum(grad_z * z) + sum(grad_logits * logits)``.

    ``features`` is the ``N x C x H x W`` batch fed to :func:`head_forward`;
    the supplied gradients have shapes ``N x e`` and ``N x |I|``.
    """
    x = _flatten_features(params, features)
    gz = np.asarray(grad_z, dtype=DTYPE).reshape(x.shape[0], -1)
    gl = np.asarray(grad_logits, dtype=DTYPE).reshape(x.shape[0], -1)
    check_finite(gz, "embedding gradient")
    check_finite(gl, "logit gradient")
    w1, b1, w2, b2, w3, b3 = params.unpack()

    h1 = x @ w1.T + b1
    a1 = np.maximum(h1, 0.0)
    z = a1 @ w2.T + b2

    gz_total = gz + gl @ w3
    dh1 = (gz_total @ w2) * (h1 > 0.0)
    grads = [
        dh1.T @ x,
        dh1.sum(axis=0),
        gz_total.T @ a1,
        gz_total.sum(axis=0),
        gl.T @ z,
        gl.sum(axis=0),
    ]
    return np.concatenate([g.ravel() for g in grads])


def predict(params: ModelParams, features) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest class index."""
    _, logits = head_forward(params, features)
    return np.argmax(np.atleast_2d(logits), axis=1)


def params_to_bytes(params: ModelParams) -> bytes:
    parts = [PARAMS_MAGIC, struct.pack("<H", PARAMS_VERSION), struct.pack("<I", len(params.shapes))]
    for shape in params.shapes:
        parts.append(struct.pack("<I", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
    parts.append(params.flat.astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, only {len(self.buf) - self.pos} left")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def params_from_bytes(buf: bytes) -> ModelParams:
    r = _Reader(buf)
    if r.take(4) != PARAMS_MAGIC:
        raise BadMagicError("not a parameter file")
    (version,) = r.unpack("<H")
    if version != PARAMS_VERSION:
        raise VersionError(f"unsupported parameter format version {version}")
    (count,) = r.unpack("<I")
    shapes = []
    for _ in range(count):
        (ndim,) = r.unpack("<I")
        shapes.append(tuple(r.unpack(f"<{ndim}I")))
    total = sum(int(np.prod(s)) for s in shapes)
    flat = np.frombuffer(r.take(8 * total), dtype="<f8").astype(DTYPE)
    if r.pos != len(buf):
        raise TruncatedError("trailing bytes after parameter payload")
    return ModelParams(flat, tuple(shapes))


def save_params(path, params: ModelParams) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())


def check_same_manifest(models: Sequence[ModelParams]) -> None:
    first = models[0].shapes
    for m in models[1:]:
        if m.shapes != first:
            raise ManifestMismatchError(f"manifest {m.shapes} differs from {first}")
