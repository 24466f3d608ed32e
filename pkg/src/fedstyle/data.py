"""Synthetic multi-domain image data, its binary file format, and client partitioning.

Class identity lives in a blocky spatial mask; domain identity lives in
a per-domain gain, per-channel bias, a 3x3 channel-mixing matrix and
additive noise, with small per-sample gain/bias jitter.

Heterogeneity ``lam`` interpolates each client's target mixture between its
anchor domain and the global domain proportions::

    w_i = (1 - lam) * onehot(anchor(i)) + lam * p_global

``lam = 0`` gives domain-pure clients, ``lam = 1`` gives homogeneous ones.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from .errors import BadMagicError, TruncatedError, VersionError
from .numerics import STREAM_DATA, STREAM_PARTITION, channel_stats, rng

DATASET_MAGIC = b"FDGD"
DATASET_VERSION = 1


@dataclass(frozen=True)
class DomainDataset:
    domain_id: int
    images: np.ndarray  # n x 3 x H x W, float32 in [0, 1]
    labels: np.ndarray  # n, int64

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    images: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    anchor_domain: int
    weights: dict[int, float] = field(default_factory=dict)
    target_weights: dict[int, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int
    lam: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("need at least one client")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


def _class_masks(g: np.random.Generator, classes: int, size: int, block: int) -> np.ndarray:
    cells = size // block
    masks = []
    seen = set()
    while len(masks) < classes:
        m = g.random((cells, cells)) < 0.5
        key = m.tobytes()
        if key in seen or m.all() or not m.any():
            continue
        seen.add(key)
        masks.append(m)
    grid = np.stack(masks).astype(np.float64)
    return np.kron(grid, np.ones((block, block)))


MAX_STYLE_DRAWS = 64


def domain_styles(
    seed: int, domains: int, gain_gap: float = 0.15, mixing: float = 0.2, cast: float = 0.3, attempt: int = 0
):
    """Per-domain ``(gain, bias[3], mix[3x3])``, deterministic in ``(seed, attempt)``.

    Gains form a shuffled geometric ladder ``0.6 * (1 + gain_gap) ** k`` so any
    two domains differ in gain by a factor of at least ``1 + gain_gap``.
    """
    if gain_gap < 0:
        raise ValueError("gain_gap must be non-negative")
    g = rng(seed, STREAM_DATA, 1, attempt)
    order = g.permutation(domains)
    styles = []
    for d in range(domains):
        gain = 0.6 * (1.0 + gain_gap) ** order[d]
        bias = g.uniform(-cast, cast, size=3)
        rand = g.random((3, 3))
        rand /= rand.sum(axis=1, keepdims=True)
        mix = (1.0 - mixing) * np.eye(3) + mixing * rand
        styles.append((gain, bias, mix))
    return styles


def generate_synthetic(
    domains: int,
    classes: int,
    per_class: int,
    image_size: int = 16,
    seed: int = 0,
    noise: float = 0.05,
    gain_gap: float = 0.15,
    jitter: float = 0.1,
    flip_prob: float = 0.0,
) -> list[DomainDataset]:
    """Balanced domains of ``classes * per_class`` images each.

    ``jitter`` perturbs gain and bias per sample and channel, so each domain is
    a cloud of styles around its centre. ``flip_prob`` flips whole mask blocks
    per sample to make classes overlap.

    Domain styles are redrawn until, for every class and every pair of
    domains, the pixel-space channel statistics ``(mu, sigma)`` differ by at
    least ``gain_gap`` in some coordinate. Bias, mixing and clipping can
    otherwise make two domains nearly coincide.
    """
    if domains < 2:
        raise ValueError("need at least two domains")
    if classes < 2:
        raise ValueError("need at least two classes")
    if per_class < 1:
        raise ValueError("per_class must be positive")
    if image_size < 4 or image_size % 4:
        raise ValueError("image_size must be a positive multiple of 4")

    block = image_size // 4
    g = rng(seed, STREAM_DATA, 0)
    masks = _class_masks(g, classes, image_size, block)
    texture = g.uniform(-1.0, 1.0, size=(3, image_size, image_size))
    for attempt in range(MAX_STYLE_DRAWS):
        styles = domain_styles(seed, domains, gain_gap, attempt=attempt)
        out = _render(seed, styles, masks, texture, classes, per_class, block, noise, jitter, flip_prob)
        if _min_style_separation(out, classes) >= gain_gap:
            return out
    raise ValueError(f"could not separate {domains} domains by gain_gap={gain_gap} in {MAX_STYLE_DRAWS} draws")


def _min_style_separation(datasets: Sequence[DomainDataset], classes: int) -> float:
    """Smallest per-class L-infinity distance between two domains' channel stats."""
    stats = []
    for ds in datasets:
        per_class = []
        for k in range(classes):
            mu, sigma = channel_stats(ds.images[ds.labels == k])
            per_class.append(np.concatenate([mu, sigma]))
        stats.append(np.stack(per_class))
    best = np.inf
    for i in range(len(stats)):
        for j in range(i + 1, len(stats)):
            best = min(best, float(np.min(np.max(np.abs(stats[i] - stats[j]), axis=1))))
    return best


def _render(seed, styles, masks, texture, classes, per_class, block, noise, jitter, flip_prob):
    out = []
    for d, (gain, bias, mix) in enumerate(styles):
        gd = rng(seed, STREAM_DATA, 2, d)
        labels = np.repeat(np.arange(classes), per_class)
        n = labels.size
        flips = gd.random((n, 4, 4)) < flip_prob
        flips = np.kron(flips, np.ones((1, block, block))).astype(bool)
        shape = np.where(flips, 1.0 - masks[labels], masks[labels])
        content = 0.15 + 0.7 * shape[:, None] + 0.1 * texture[None]
        mixed = np.einsum("ij,njhw->nihw", mix, content)
        sample_gain = gain * (1.0 + jitter * gd.uniform(-1.0, 1.0, size=(n, 3, 1, 1)))
        sample_bias = bias[None, :, None, None] + jitter * gd.uniform(-1.0, 1.0, size=(n, 3, 1, 1))
        img = sample_gain * mixed + sample_bias
        img = img + noise * gd.standard_normal(img.shape)
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        out.append(DomainDataset(d, img, labels.astype(np.int64)))
    return out


def save_dataset(path, datasets: Sequence[DomainDataset]) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(datasets))


def dataset_to_bytes(datasets: Sequence[DomainDataset]) -> bytes:
    if len(datasets) == 0:
        raise ValueError("refusing to save an empty domain list")
    parts = [DATASET_MAGIC, struct.pack("<H", DATASET_VERSION), struct.pack("<I", len(datasets))]
    for ds in datasets:
        n, c, h, w = ds.images.shape
        if ds.labels.size and (ds.labels.min() < 0 or ds.labels.max() > 0xFFFF):
            raise ValueError("labels must fit in u16")
        parts.append(struct.pack("<IIIII", ds.domain_id, n, c, h, w))
        parts.append(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
        parts.append(ds.labels.astype("<u2").tobytes())
    return b"".join(parts)


def dataset_from_bytes(buf: bytes) -> list[DomainDataset]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedError(f"dataset truncated at offset {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4) != DATASET_MAGIC:
        raise BadMagicError("not an FDGD dataset file")
    (version,) = struct.unpack("<H", take(2))
    if version != DATASET_VERSION:
        raise VersionError(f"unsupported dataset version {version}")
    (count,) = struct.unpack("<I", take(4))
    out = []
    for _ in range(count):
        domain_id, n, c, h, w = struct.unpack("<IIIII", take(20))
        images = np.frombuffer(take(4 * n * c * h * w), dtype="<f4").reshape(n, c, h, w)
        labels = np.frombuffer(take(2 * n), dtype="<u2").astype(np.int64)
        out.append(DomainDataset(domain_id, images.astype(np.float32), labels))
    if pos != len(buf):
        raise TruncatedError("trailing bytes after dataset payload")
    return out


def load_dataset(path) -> list[DomainDataset]:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


def _largest_remainder(total: int, shares: np.ndarray) -> np.ndarray:
    """Integers proportional to ``shares`` summing to ``total``; ties to lower index."""
    ideal = total * shares / shares.sum()
    base = np.floor(ideal).astype(np.int64)
    rest = total - int(base.sum())
    order = np.argsort(-(ideal - base), kind="stable")
    base[order[:rest]] += 1
    return base


def _ceil_by_flow(frac: np.ndarray, row_need: np.ndarray, col_need: np.ndarray) -> np.ndarray:
    """0/1 matrix on the fractional cells meeting as many margin needs as a max flow allows."""
    r, c = frac.shape
    src, sink = r + c, r + c + 1
    cap = np.zeros((r + c + 2, r + c + 2), dtype=np.int32)
    cap[src, :r] = np.maximum(row_need, 0)
    cap[:r, r : r + c] = frac > 1e-9
    cap[r : r + c, sink] = np.maximum(col_need, 0)
    flow = maximum_flow(csr_matrix(cap), src, sink, method="dinic").flow.toarray()
    return np.maximum(flow[:r, r : r + c], 0).astype(np.int64)


def _round_matrix(target: np.ndarray, row_sums: np.ndarray, col_sums: np.ndarray) -> np.ndarray:
    """Integer matrix near ``target`` with exact integer margins.

    When the target's margins are integral, every cell lands on its floor or ceiling.
    """
    counts = np.floor(target + 1e-9).astype(np.int64)
    frac = target - counts
    up = _ceil_by_flow(frac, row_sums - counts.sum(axis=1), col_sums - counts.sum(axis=0))
    counts += up
    frac = np.where(up > 0, 0.0, frac)
    row_need = row_sums - counts.sum(axis=1)
    col_need = col_sums - counts.sum(axis=0)
    for flat in np.argsort(-frac, axis=None, kind="stable"):
        i, d = np.unravel_index(flat, target.shape)
        if row_need[i] > 0 and col_need[d] > 0:
            counts[i, d] += 1
            row_need[i] -= 1
            col_need[d] -= 1
    # greedy can strand a few units; place them wherever both margins still need them
    for i in np.flatnonzero(row_need > 0):
        for d in np.flatnonzero(col_need > 0):
            step = min(row_need[i], col_need[d])
            counts[i, d] += step
            row_need[i] -= step
            col_need[d] -= step
    return counts


def target_mixture(lam: float, anchor: int, p_global: np.ndarray) -> np.ndarray:
    w = lam * p_global.astype(np.float64)
    w[anchor] += 1.0 - lam
    return w


def partition_clients(datasets: Sequence[DomainDataset], cfg: PartitionConfig) -> list[ClientShard]:
    m = len(datasets)
    if m == 0:
        raise ValueError("no domains to partition")
    sizes = np.array([len(ds) for ds in datasets], dtype=np.int64)
    total = int(sizes.sum())
    n_clients = cfg.num_clients
    if n_clients > total:
        raise ValueError(f"{n_clients} clients but only {total} samples")

    p_global = sizes / total
    anchors = np.arange(n_clients) % m
    anchored = np.bincount(anchors, minlength=m)

    # Shard sizes: each domain's samples are split among the clients anchored on it.
    # With these sizes the target mixtures sum exactly to the domain sizes.
    shard_sizes = np.zeros(n_clients, dtype=np.int64)
    for d in range(m):
        members = np.flatnonzero(anchors == d)
        if members.size:
            shard_sizes[members] = _largest_remainder(int(sizes[d]), np.ones(members.size))

    targets = np.stack([target_mixture(cfg.lam, a, p_global) for a in anchors])
    ideal = targets * shard_sizes[:, None]
    covered = anchored > 0
    col_sums = np.where(covered, sizes, np.round(ideal.sum(axis=0)).astype(np.int64))
    col_sums = np.minimum(col_sums, sizes)
    row_sums = _largest_remainder(int(col_sums.sum()), np.maximum(shard_sizes, 1e-12).astype(np.float64))
    counts = _round_matrix(ideal, row_sums, col_sums)

    g = rng(cfg.seed, STREAM_PARTITION)
    assigned: list[list[tuple[int, int]]] = [[] for _ in range(n_clients)]
    for d, ds in enumerate(datasets):
        order = g.permutation(len(ds))
        start = 0
        for i in range(n_clients):
            take = int(counts[i, d])
            assigned[i].extend((d, int(j)) for j in order[start : start + take])
            start += take
        # leftovers (only when some domain has no anchored client) go round-robin
        for k, j in enumerate(order[start:]):
            assigned[k % n_clients].append((d, int(j)))

    shards = []
    for i in range(n_clients):
        pairs = assigned[i]
        dom_idx = np.array([p[0] for p in pairs], dtype=np.int64)
        if pairs:
            images = np.stack([datasets[d].images[j] for d, j in pairs])
            labels = np.array([datasets[d].labels[j] for d, j in pairs], dtype=np.int64)
        else:
            images = np.zeros((0,) + datasets[0].images.shape[1:], dtype=np.float32)
            labels = np.zeros(0, dtype=np.int64)
        domain_ids = np.array([datasets[d].domain_id for d in dom_idx], dtype=np.int64)
        realized = {}
        if pairs:
            for d in range(m):
                c = int(np.sum(dom_idx == d))
                if c:
                    realized[datasets[d].domain_id] = c / len(pairs)
        target = {datasets[d].domain_id: float(targets[i, d]) for d in range(m) if targets[i, d] > 0}
        shards.append(
            ClientShard(
                client_id=i,
                images=images,
                labels=labels,
                domains=domain_ids,
                anchor_domain=datasets[int(anchors[i])].domain_id,
                weights=realized,
                target_weights=target,
            )
        )
    return shards
