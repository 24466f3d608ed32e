"""Local client update: cross-entropy plus style-contrastive triplet and embedding penalty.

For a batch the head is evaluated twice, on the encoder features ``F`` and on
their style-transferred version ``adain(F, S_g)``. The loss is

    mean CE(logits, y) + gamma1 * triplet / B + gamma2 * reg / B

where each anchor ``z_i`` is pulled toward its own transferred embedding and
pushed from the transferred embeddings of other-class samples.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model import ModelParams, StyleEncoder, backward, encoder_forward, head_forward
from .errors import InvariantViolation
from .numerics import DTYPE, STREAM_SHUFFLE, rng
from .style import adain

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    gamma1: float = 1.0
    gamma2: float = 0.01
    alpha: float = 0.2
    lr: float = 0.01
    batch_size: int = 32
    local_epochs: int = 1
    seed: int = 0
    ce_on_transferred: bool = False

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0 or self.alpha < 0:
            raise ValueError("gamma1, gamma2 and alpha must be non-negative")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ValueError("batch_size and local_epochs must be positive")

    @property
    def contrastive(self) -> bool:
        return self.gamma1 > 0 or self.gamma2 > 0


@dataclass(frozen=True)
class LossParts:
    ce: float
    triplet: float
    reg: float
    total: float


@dataclass(frozen=True)
class LocalUpdateResult:
    client_id: int
    params: ModelParams
    num_samples: int
    epoch_losses: tuple[LossParts, ...]


def ce_loss(logits, label: int) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=DTYPE)
    if not 0 <= label < logits.size:
        raise ValueError(f"label {label} outside 0..{logits.size - 1}")
    shifted = logits - logits.max()
    log_z = np.log(np.sum(np.exp(shifted)))
    probs = np.exp(shifted - log_z)
    grad = probs.copy()
    grad[label] -= 1.0
    return float(log_z - shifted[label]), grad


def batch_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits."""
    b = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    probs = np.exp(shifted - log_z[:, None])
    losses = log_z - shifted[np.arange(b), labels]
    grad = probs
    grad[np.arange(b), labels] -= 1.0
    return float(losses.mean()), grad / b


def triplet_loss(z, z_pos, labels, alpha: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Summed hinge triplet loss with the mean negative distance.

    Negatives of sample ``i`` are the transferred embeddings ``z_pos[j]`` of
    every ``j`` with a different label. Returns ``(loss, dL/dz, dL/dz_pos)``.
    """
    z = np.asarray(z, dtype=DTYPE)
    zp = np.asarray(z_pos, dtype=DTYPE)
    labels = np.asarray(labels)
    if z.shape != zp.shape or z.shape[0] != labels.shape[0]:
        raise ValueError("anchor, positive and label counts differ")
    b = z.shape[0]
    neg_mask = labels[:, None] != labels[None, :]
    neg_count = neg_mask.sum(axis=1)
    has_neg = neg_count > 0
    if not has_neg.any():
        log.warning("triplet batch of %d samples has a single class; triplet term is zero", b)
        return 0.0, np.zeros_like(z), np.zeros_like(zp)

    diff_pos = z - zp
    pos_d2 = np.sum(diff_pos**2, axis=1)
    # all pairwise anchor-to-transferred squared distances
    cross = z[:, None, :] - zp[None, :, :]
    d2 = np.sum(cross**2, axis=2)
    weights = np.where(neg_mask, 1.0 / np.maximum(neg_count, 1)[:, None], 0.0)
    mean_neg = np.sum(weights * d2, axis=1)
    terms = pos_d2 - mean_neg + alpha
    active = has_neg & (terms > 0.0)
    loss = float(np.sum(terms[active]))

    w = weights * active[:, None]
    grad_z = 2.0 * diff_pos * active[:, None] - 2.0 * np.einsum("ij,ijk->ik", w, cross)
    grad_zp = -2.0 * diff_pos * active[:, None] + 2.0 * np.einsum("ij,ijk->jk", w, cross)
    return loss, grad_z, grad_zp


def reg_loss(z, z_pos) -> tuple[float, np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=DTYPE)
    zp = np.asarray(z_pos, dtype=DTYPE)
    if z.shape != zp.shape:
        raise ValueError("embedding batches differ in shape")
    return float(np.sum(z**2) + np.sum(zp**2)), 2.0 * z, 2.0 * zp


def composite_loss_features(
    feats: np.ndarray,
    feats_t: np.ndarray | None,
    labels: np.ndarray,
    params: ModelParams,
    cfg: TrainConfig,
) -> tuple[LossParts, np.ndarray]:
    """Loss parts and flat gradient given encoder features and their transferred copy.

    ``feats_t`` may be ``None`` only when the contrastive terms are disabled.
    """
    b = feats.shape[0]
    z, logits = head_forward(params, feats)
    ce, g_logits = batch_ce(logits, labels)
    g_z = np.zeros_like(z)
    trip = reg = 0.0

    if cfg.contrastive or cfg.ce_on_transferred:
        if feats_t is None:
            raise ValueError("transferred features required for the contrastive terms")
        zp, logits_t = head_forward(params, feats_t)
        g_zp = np.zeros_like(zp)
        g_logits_t = np.zeros_like(logits_t)
        if cfg.gamma1 > 0:
            trip, gz_t, gzp_t = triplet_loss(z, zp, labels, cfg.alpha)
            g_z += (cfg.gamma1 / b) * gz_t
            g_zp += (cfg.gamma1 / b) * gzp_t
        if cfg.gamma2 > 0:
            reg, gz_r, gzp_r = reg_loss(z, zp)
            g_z += (cfg.gamma2 / b) * gz_r
            g_zp += (cfg.gamma2 / b) * gzp_r
        if cfg.ce_on_transferred:
            ce_t, g_logits_t = batch_ce(logits_t, labels)
            ce += ce_t
        grad = backward(params, feats, g_z, g_logits) + backward(params, feats_t, g_zp, g_logits_t)
    else:
        grad = backward(params, feats, g_z, g_logits)

    total = ce + cfg.gamma1 * trip / b + cfg.gamma2 * reg / b
    return LossParts(ce, trip, reg, total), grad


def composite_loss(
    images: np.ndarray,
    labels: np.ndarray,
    params: ModelParams,
    s_g: np.ndarray,
    cfg: TrainConfig,
    enc: StyleEncoder,
) -> tuple[float, np.ndarray]:
    feats = encoder_forward(enc, images)
    parts, grad = composite_loss_features(feats, adain(feats, s_g), np.asarray(labels), params, cfg)
    return parts.total, grad


def local_update_features(
    client_id: int,
    feats: np.ndarray,
    feats_t: np.ndarray | None,
    labels: np.ndarray,
    global_params: ModelParams,
    cfg: TrainConfig,
    round_index: int,
) -> LocalUpdateResult:
    """SGD over precomputed features; the encoder and AdaIN are constant w.r.t. params."""
    n = feats.shape[0]
    if n == 0:
        raise ValueError(f"client {client_id} has no samples")
    g = rng(cfg.seed, STREAM_SHUFFLE, client_id, round_index)
    flat = global_params.flat.copy()
    history = []
    for _ in range(cfg.local_epochs):
        order = g.permutation(n)
        sums = np.zeros(4)
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            params = global_params.with_flat(flat)
            try:
                parts, grad = composite_loss_features(
                    feats[idx], None if feats_t is None else feats_t[idx], labels[idx], params, cfg
                )
            except FloatingPointError as exc:
                raise InvariantViolation(
                    f"client {client_id} round {round_index}: training diverged at batch {batches} ({exc}, lr={cfg.lr})"
                ) from exc
            flat = flat - cfg.lr * grad
            sums += (parts.ce, parts.triplet, parts.reg, parts.total)
            batches += 1
        mean = sums / batches
        history.append(LossParts(*map(float, mean)))
    if not np.all(np.isfinite(flat)):
        raise InvariantViolation(
            f"client {client_id} round {round_index}: {int(np.sum(~np.isfinite(flat)))} non-finite parameters "
            f"after local update (lr={cfg.lr}, last losses {history[-1] if history else None})"
        )
    return LocalUpdateResult(client_id, global_params.with_flat(flat), n, tuple(history))


def local_update(shard, global_params: ModelParams, s_g, cfg: TrainConfig, enc: StyleEncoder, round_index: int = 0):
    feats = encoder_forward(enc, shard.images)
    feats_t = adain(feats, s_g) if (cfg.contrastive or cfg.ce_on_transferred) else None
    return local_update_features(shard.client_id, feats, feats_t, shard.labels, global_params, cfg, round_index)
