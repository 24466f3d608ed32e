"""Federated simulation: style collection, client sampling, local training, aggregation, evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DomainDataset, PartitionConfig, partition_clients
from .errors import InvariantViolation
from .model import (
    ModelParams,
    StyleEncoder,
    check_same_manifest,
    encoder_forward,
    init_params,
    predict,
    save_params,
)
from .numerics import STREAM_SAMPLING, rng
from .style import (
    ClientStyleReport,
    adain,
    global_style_report,
    interpolation_style,
    local_style_from_features,
    reports_to_bytes,
)
from .trainer import LocalUpdateResult, TrainConfig, local_update_features

log = logging.getLogger(__name__)

SCHEMES = ("LODO", "LTDO")


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 20
    sample_frac: float = 0.25
    rounds: int = 30
    lam: float = 0.1
    scheme: str = "LODO"
    train_domains: tuple[int, ...] = (0, 1, 2)
    eval_domains: tuple[int, ...] = (3,)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    channels: int = 16
    hidden: int = 128
    embed: int = 64
    local_clustering: str = "finch"
    global_clustering: str = "finch"
    finch_level: int = -1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be positive")
        if not 0.0 < self.sample_frac <= 1.0:
            raise ValueError("sample_frac must lie in (0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if set(self.train_domains) & set(self.eval_domains):
            raise ValueError("train and eval domains overlap")
        if not self.train_domains or not self.eval_domains:
            raise ValueError("train and eval domain lists must be non-empty")
        expected = 1 if self.scheme == "LODO" else 2
        if len(self.eval_domains) != expected:
            raise ValueError(f"{self.scheme} holds out {expected} domain(s), got {len(self.eval_domains)}")

    @property
    def clients_per_round(self) -> int:
        return clients_per_round(self.num_clients, self.sample_frac)


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    clients: list[int]
    loss_ce: float
    loss_triplet: float
    loss_reg: float
    acc_by_domain: dict[str, float]
    acc_avg: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class RunResult:
    metrics: list[RoundMetrics]
    params: ModelParams
    s_g: np.ndarray
    reports: list[ClientStyleReport]


def split_scheme(domain_ids: Sequence[int], scheme: str, held_out: Sequence[int] | None = None):
    """Return ``(train_domains, eval_domains)``; the default holds out the highest ids."""
    ids = list(domain_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate domain ids")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    count = 1 if scheme == "LODO" else 2
    if len(ids) < count + 1:
        raise ValueError(f"{scheme} needs at least {count + 1} domains, got {len(ids)}")
    held = list(held_out) if held_out is not None else sorted(ids)[-count:]
    if len(held) != count or len(set(held)) != count:
        raise ValueError(f"{scheme} holds out exactly {count} distinct domain(s)")
    missing = set(held) - set(ids)
    if missing:
        raise ValueError(f"held-out domains {sorted(missing)} not present")
    train = [d for d in ids if d not in held]
    return train, sorted(held)


def clients_per_round(num_clients: int, frac: float) -> int:
    # guard against products like 0.1 * 30 = 3.0000000000000004
    return max(1, min(num_clients, math.ceil(num_clients * frac - 1e-9)))


def sample_clients(num_clients: int, frac: float, round_index: int, seed: int) -> list[int]:
    m = clients_per_round(num_clients, frac)
    picked = rng(seed, STREAM_SAMPLING, round_index).choice(num_clients, size=m, replace=False)
    return sorted(int(i) for i in picked)


def aggregate(results: Sequence[tuple[int, ModelParams, int]]) -> ModelParams:
    """Sample-weighted mean of client models.

    ``results`` holds ``(client_id, params, n_i)``. Reduction runs in ascending
    client id order and is expressed as offsets from the first model, so that
    equal models aggregate to themselves bit for bit.
    """
    if not results:
        raise ValueError("nothing to aggregate")
    ordered = sorted(results, key=lambda r: r[0])
    check_same_manifest([r[1] for r in ordered])
    total = float(sum(r[2] for r in ordered))
    if total <= 0:
        raise ValueError("aggregation weights must sum to a positive count")
    base = ordered[0][1].flat
    acc = base.copy()
    for _, params, n in ordered:
        acc = acc + (n / total) * (params.flat - base)
    return ordered[0][1].with_flat(acc)


def evaluate_features(params: ModelParams, features: dict[int, tuple[np.ndarray, np.ndarray]]):
    acc = {}
    for dom in sorted(features):
        feats, labels = features[dom]
        if labels.size == 0:
            raise ValueError(f"domain {dom} has no samples")
        acc[dom] = float(np.mean(predict(params, feats) == labels))
    avg = float(np.mean(list(acc.values())))
    return acc, avg


def evaluate(params: ModelParams, enc: StyleEncoder, datasets: Sequence[DomainDataset]):
    """Per-domain accuracy and their unweighted average."""
    if not datasets:
        raise ValueError("no evaluation domains")
    feats = {ds.domain_id: (encoder_forward(enc, ds.images), ds.labels) for ds in datasets}
    return evaluate_features(params, feats)


def collect_styles(cfg: FederationConfig, enc: StyleEncoder, client_feats) -> tuple[list[ClientStyleReport], np.ndarray]:
    reports = [
        local_style_from_features(cid, feats, cfg.local_clustering, cfg.finch_level)
        for cid, (feats, _) in enumerate(client_feats)
    ]
    return reports, interpolation_style(reports, cfg.global_clustering, cfg.finch_level)


def select_domains(datasets: Sequence[DomainDataset], ids: Sequence[int]) -> list[DomainDataset]:
    by_id = {ds.domain_id: ds for ds in datasets}
    missing = [d for d in ids if d not in by_id]
    if missing:
        raise ValueError(f"domains {missing} not in dataset")
    return [by_id[d] for d in ids]


def run(cfg: FederationConfig, datasets: Sequence[DomainDataset], out_dir: str | Path | None = None) -> RunResult:
    train_sets = select_domains(datasets, cfg.train_domains)
    eval_sets = select_domains(datasets, cfg.eval_domains)
    tcfg = replace(cfg.train, seed=cfg.seed)

    shards = partition_clients(train_sets, PartitionConfig(cfg.num_clients, cfg.lam, cfg.seed))
    empty = [s.client_id for s in shards if len(s) == 0]
    if empty:
        raise ValueError(f"clients {empty} received no samples; use fewer clients")
    enc = StyleEncoder.create(cfg.seed, cfg.channels)
    client_feats = [(encoder_forward(enc, s.images), s.labels) for s in shards]

    # phase 0: one-time style upload from every client
    reports, s_g = collect_styles(cfg, enc, client_feats)
    need_transfer = tcfg.contrastive or tcfg.ce_on_transferred
    client_transfer = [adain(f, s_g) if need_transfer else None for f, _ in client_feats]

    eval_feats = {ds.domain_id: (encoder_forward(enc, ds.images), ds.labels) for ds in eval_sets}
    in_dim = int(np.prod(client_feats[0][0].shape[1:]))
    params = init_params(in_dim, cfg.hidden, cfg.embed, int(max(ds.labels.max() for ds in datasets)) + 1, cfg.seed)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "styles.bin").write_bytes(reports_to_bytes(reports + [global_style_report(s_g)]))

    metrics: list[RoundMetrics] = []
    for r in range(1, cfg.rounds + 1):
        sampled = sample_clients(cfg.num_clients, cfg.sample_frac, r, cfg.seed)
        updates: list[LocalUpdateResult] = []
        for cid in sampled:
            feats, labels = client_feats[cid]
            updates.append(local_update_features(cid, feats, client_transfer[cid], labels, params, tcfg, r))
        params = aggregate([(u.client_id, u.params, u.num_samples) for u in updates])
        if not np.all(np.isfinite(params.flat)):
            bad = int(np.sum(~np.isfinite(params.flat)))
            raise InvariantViolation(f"round {r}: {bad} non-finite parameters after aggregation (clients {sampled})")

        acc, avg = evaluate_features(params, eval_feats)
        last = [u.epoch_losses[-1] for u in updates]
        rec = RoundMetrics(
            round=r,
            clients=sampled,
            loss_ce=float(np.mean([l.ce for l in last])),
            loss_triplet=float(np.mean([l.triplet for l in last])),
            loss_reg=float(np.mean([l.reg for l in last])),
            acc_by_domain={str(d): a for d, a in acc.items()},
            acc_avg=avg,
        )
        metrics.append(rec)
        log.info("round %d acc_avg=%.4f ce=%.4f", r, avg, rec.loss_ce)
        if out is not None and cfg.checkpoint_every and r % cfg.checkpoint_every == 0 and r != cfg.rounds:
            save_params(out / f"checkpoint_round{r:04d}.bin", params)

    if out is not None:
        write_metrics(out, metrics)
        save_params(out / "checkpoint.bin", params)
    return RunResult(metrics, params, s_g, reports)


def write_metrics(out_dir: str | Path, metrics: Sequence[RoundMetrics]) -> None:
    out = Path(out_dir)
    with open(out / "metrics.jsonl", "w", newline="\n") as fh:
        for m in metrics:
            fh.write(m.to_json() + "\n")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "acc_avg"])
        for m in metrics:
            w.writerow([m.round, repr(m.acc_avg)])


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
