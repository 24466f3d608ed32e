"""Client style statistics, the server's interpolation style, and AdaIN.

A style vector is ``concat(mu, sigma)`` of length ``2C`` over encoder
feature channels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BadMagicError, InvariantViolation, TruncatedError, VersionError
from .finch import cluster_members, finch
from .model import StyleEncoder, encoder_forward
from .numerics import DTYPE, channel_stats, coordwise_median, instance_stats

ADAIN_EPS = 1e-6
STYLE_MAGIC = b"FDGS"
STYLE_VERSION = 1
SERVER_ID = 0xFFFFFFFF


def make_style(mu, sigma) -> np.ndarray:
    return np.concatenate([np.asarray(mu, dtype=DTYPE), np.asarray(sigma, dtype=DTYPE)])


def split_style(style) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(style, dtype=DTYPE)
    if s.ndim != 1 or s.size % 2:
        raise ValueError(f"style vector must have even length, got shape {s.shape}")
    c = s.size // 2
    return s[:c], s[c:]


@dataclass(frozen=True)
class ClientStyleReport:
    client_id: int
    cluster_styles: tuple[np.ndarray, ...]

    @property
    def client_style(self) -> np.ndarray:
        return np.mean(np.stack(self.cluster_styles), axis=0)

    @property
    def channels(self) -> int:
        return self.cluster_styles[0].size // 2


def local_style_from_features(
    client_id: int,
    features: np.ndarray,
    clustering: str = "finch",
    level: int = -1,
) -> ClientStyleReport:
    """Style report from precomputed ``n x C x H x W`` encoder features.

    ``clustering="finch"`` clusters flattened feature maps and computes pooled
    statistics per cluster. ``clustering="mean"`` is the ablation that skips
    clustering and averages the per-sample styles into one vector.
    """
    feats = np.asarray(features, dtype=DTYPE)
    if feats.ndim != 4 or feats.shape[0] == 0:
        raise ValueError("local style needs a non-empty feature batch")
    if clustering == "mean":
        mu, sigma = instance_stats(feats)
        return ClientStyleReport(client_id, (make_style(mu.mean(axis=0), sigma.mean(axis=0)),))
    if clustering != "finch":
        raise ValueError(f"unknown local clustering mode {clustering!r}")

    labels = finch(feats.reshape(feats.shape[0], -1)).level(level)
    styles = tuple(make_style(*channel_stats(feats[idx])) for idx in cluster_members(labels))
    return ClientStyleReport(client_id, styles)


def local_style(shard, enc: StyleEncoder, clustering: str = "finch", level: int = -1) -> ClientStyleReport:
    if len(shard) == 0:
        raise ValueError(f"client {shard.client_id} has an empty shard")
    return local_style_from_features(shard.client_id, encoder_forward(enc, shard.images), clustering, level)


def interpolation_style(
    reports: Sequence[ClientStyleReport],
    clustering: str = "finch",
    level: int = -1,
) -> np.ndarray:
    """Cluster client styles, average within clusters, take the coordinate median.

    ``clustering="mean"`` is the ablation that averages all client styles.
    """
    if len(reports) == 0:
        raise ValueError("interpolation style needs at least one report")
    ordered = sorted(reports, key=lambda r: r.client_id)
    styles = np.stack([r.client_style for r in ordered])
    if len(ordered) == 1:
        s_g = styles[0].copy()
    elif clustering == "mean":
        s_g = styles.mean(axis=0)
    elif clustering == "finch":
        labels = finch(styles).level(level)
        cluster_means = [styles[idx].mean(axis=0) for idx in cluster_members(labels)]
        s_g = coordwise_median(cluster_means)
    else:
        raise ValueError(f"unknown global clustering mode {clustering!r}")

    _, sigma = split_style(s_g)
    if np.any(sigma < 0):
        raise InvariantViolation("interpolation style has a negative standard deviation")
    return s_g


def adain(content, style, eps: float = ADAIN_EPS) -> np.ndarray:
    """Re-target each sample's channel mean/std to ``style``."""
    x = np.asarray(content, dtype=DTYPE)
    if x.ndim != 4:
        raise ValueError(f"adain expects N x C x H x W, got shape {x.shape}")
    target_mu, target_sigma = split_style(style)
    if target_mu.size != x.shape[1]:
        raise ValueError(f"style has {target_mu.size} channels, content has {x.shape[1]}")
    mu, sigma = instance_stats(x)
    normed = (x - mu[:, :, None, None]) / (sigma[:, :, None, None] + eps)
    return target_sigma[None, :, None, None] * normed + target_mu[None, :, None, None]


def reports_to_bytes(reports: Sequence[ClientStyleReport]) -> bytes:
    if not reports:
        raise ValueError("no style reports to write")
    channels = reports[0].channels
    parts = [STYLE_MAGIC, struct.pack("<HII", STYLE_VERSION, channels, len(reports))]
    for r in reports:
        if r.channels != channels:
            raise ValueError("style reports disagree on channel count")
        parts.append(struct.pack("<II", r.client_id, len(r.cluster_styles)))
        for s in r.cluster_styles:
            parts.append(np.asarray(s, dtype="<f8").tobytes())
    return b"".join(parts)


def reports_from_bytes(buf: bytes) -> list[ClientStyleReport]:
    if len(buf) < 4 or buf[:4] != STYLE_MAGIC:
        raise BadMagicError("not a style report file")
    header = struct.calcsize("<HII")
    if len(buf) < 4 + header:
        raise TruncatedError("style header truncated")
    version, channels, count = struct.unpack_from("<HII", buf, 4)
    if version != STYLE_VERSION:
        raise VersionError(f"unsupported style file version {version}")
    pos = 4 + header
    width = 16 * channels
    out = []
    for _ in range(count):
        if pos + 8 > len(buf):
            raise TruncatedError("style report header truncated")
        cid, k = struct.unpack_from("<II", buf, pos)
        pos += 8
        if pos + k * width > len(buf):
            raise TruncatedError("style vectors truncated")
        styles = tuple(
            np.frombuffer(buf, dtype="<f8", count=2 * channels, offset=pos + j * width).astype(DTYPE)
            for j in range(k)
        )
        pos += k * width
        out.append(ClientStyleReport(cid, styles))
    if pos != len(buf):
        raise TruncatedError("trailing bytes after style reports")
    return out


def global_style_report(s_g) -> ClientStyleReport:
    return ClientStyleReport(SERVER_ID, (np.asarray(s_g, dtype=DTYPE),))
