"""Command-line entry point.

Exit codes: 0 success, 2 usage or validation error, 3 runtime invariant
violation, 4 I/O error (missing or corrupt file).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, build_config, config_to_dict, parse_config_text, variant_of
from .data import PartitionConfig, generate_synthetic, load_dataset, partition_clients, save_dataset
from .errors import FormatError, InvariantViolation
from .federation import FederationConfig, collect_styles, evaluate, read_metrics, run, select_domains
from .finch import finch
from .model import StyleEncoder, encoder_forward, load_params
from .style import global_style_report, reports_to_bytes

log = logging.getLogger("fedstyle")

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_IO = 0, 2, 3, 4

# command-line overrides layered on top of the config file: flag -> (section, key)
OVERRIDES = {
    "clients": ("federation", "clients"),
    "sample_frac": ("federation", "sample_frac"),
    "rounds": ("federation", "rounds"),
    "lam": ("federation", "lam"),
    "scheme": ("federation", "scheme"),
    "train_domains": ("federation", "train_domains"),
    "eval_domains": ("federation", "eval_domains"),
    "seed": ("federation", "seed"),
    "checkpoint_every": ("federation", "checkpoint_every"),
    "gamma1": ("trainer", "gamma1"),
    "gamma2": ("trainer", "gamma2"),
    "alpha": ("trainer", "alpha"),
    "lr": ("trainer", "lr"),
    "batch_size": ("trainer", "batch_size"),
    "local_epochs": ("trainer", "local_epochs"),
    "local_clustering": ("style", "local_clustering"),
    "global_clustering": ("style", "global_clustering"),
    "channels": ("model", "channels"),
}


class UsageError(ValueError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def resolve_config(args) -> FederationConfig:
    values: dict[str, dict[str, str]] = {}
    if getattr(args, "config", None):
        values = parse_config_text(Path(args.config).read_text())
    for flag, (section, key) in OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is None:
            continue
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        values.setdefault(section, {})[key] = str(v)
    if args.data_domains is not None:
        # without explicit domain lists, hold out the highest ids per the scheme
        fed = values.get("federation", {})
        if "train_domains" not in fed or "eval_domains" not in fed:
            from .federation import split_scheme

            scheme = fed.get("scheme", FederationConfig.scheme)
            held = [int(x) for x in fed["eval_domains"].split(",")] if "eval_domains" in fed else None
            train, held = split_scheme(args.data_domains, scheme, held)
            values.setdefault("federation", {}).setdefault("train_domains", ",".join(map(str, train)))
            values["federation"].setdefault("eval_domains", ",".join(map(str, held)))
    return build_config(values)


def write_manifest(path, cfg: FederationConfig, data_path) -> dict:
    manifest = {
        "tool": "fedstyle",
        "version": __version__,
        "seed": cfg.seed,
        "dataset": {"path": str(data_path), "sha256": sha256_file(data_path)},
        "variant": variant_of(cfg),
        "config": config_to_dict(cfg),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def cmd_gen_data(args) -> int:
    datasets = generate_synthetic(args.domains, args.classes, args.per_class, args.image_size, args.seed)
    save_dataset(args.out, datasets)
    total = sum(len(d) for d in datasets)
    print(f"wrote {args.out}: {args.domains} domains x {args.classes} classes x {args.per_class} per class = {total} samples")
    for ds in datasets:
        counts = np.bincount(ds.labels, minlength=args.classes)
        print(f"  domain {ds.domain_id}: n={len(ds)} image={tuple(ds.images.shape[1:])} per_class={counts.tolist()}")
    return EXIT_OK


def cmd_partition(args) -> int:
    datasets = load_dataset(args.data)
    if args.domains:
        datasets = select_domains(datasets, args.domains)
    shards = partition_clients(datasets, PartitionConfig(args.clients, args.lam, args.seed))
    dom_ids = [ds.domain_id for ds in datasets]
    header = ["client", "anchor", "n"] + [f"domain_{d}" for d in dom_ids]
    rows = []
    for s in shards:
        counts = [int(np.sum(s.domains == d)) for d in dom_ids]
        rows.append([s.client_id, s.anchor_domain, len(s)] + counts)
    _emit_table(header, rows, args.out)
    return EXIT_OK


def cmd_cluster(args) -> int:
    with open(args.input, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    try:
        points = np.array([[float(x) for x in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise UsageError(f"{args.input}: non-numeric entry ({exc})") from None
    if points.ndim != 2 or len(points) == 0:
        raise UsageError(f"{args.input}: expected a non-empty rectangular table of vectors")
    h = finch(points, args.metric)
    header = ["point"] + [f"level_{i + 1}" for i in range(len(h))]
    table = [[i] + [int(level[i]) for level in h.levels] for i in range(len(points))]
    _emit_table(header, table, args.out)
    print(f"# clusters per level: {h.counts}", file=sys.stderr)
    return EXIT_OK


def cmd_styles(args) -> int:
    args.data_domains = [ds.domain_id for ds in load_dataset(args.data)]
    cfg = resolve_config(args)
    datasets = select_domains(load_dataset(args.data), cfg.train_domains)
    shards = partition_clients(datasets, PartitionConfig(cfg.num_clients, cfg.lam, cfg.seed))
    enc = StyleEncoder.create(cfg.seed, cfg.channels)
    feats = [(encoder_forward(enc, s.images), s.labels) for s in shards]
    reports, s_g = collect_styles(cfg, enc, feats)
    Path(args.out).write_bytes(reports_to_bytes(reports + [global_style_report(s_g)]))
    for r in reports:
        print(f"client {r.client_id}: {len(r.cluster_styles)} cluster(s)")
    half = len(s_g) // 2
    print("S_g mu    = " + " ".join(f"{v:.4f}" for v in s_g[:half]))
    print("S_g sigma = " + " ".join(f"{v:.4f}" for v in s_g[half:]))
    return EXIT_OK


def cmd_train(args) -> int:
    datasets = load_dataset(args.data)
    args.data_domains = [ds.domain_id for ds in datasets]
    cfg = resolve_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = write_manifest(out / "manifest.json", cfg, args.data)
    result = run(cfg, datasets, out)
    last = result.metrics[-1]
    print(f"mode={manifest['variant']['mode']} rounds={len(result.metrics)} final acc_avg={last.acc_avg:.4f}")
    for dom, acc in last.acc_by_domain.items():
        print(f"  domain {dom}: {acc:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.domains:
        raise UsageError("empty domain list")
    manifest_path = Path(args.manifest) if args.manifest else Path(args.checkpoint).parent / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    cfg = build_config(manifest["config"])
    params = load_params(args.checkpoint)
    enc = StyleEncoder.create(cfg.seed, cfg.channels)
    datasets = select_domains(load_dataset(args.data), args.domains)
    expected = int(np.prod(enc.output_shape(*datasets[0].images.shape[2:])))
    if params.input_dim != expected:
        raise UsageError(f"checkpoint expects {params.input_dim} input features, encoder produces {expected}")
    acc, avg = evaluate(params, enc, datasets)
    rows = [[d, repr(a)] for d, a in acc.items()] + [["AVG", repr(avg)]]
    _emit_table(["domain", "accuracy"], rows, args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    records = read_metrics(args.metrics)
    if not records:
        raise UsageError(f"{args.metrics}: no metric records")
    domains = sorted(records[0]["acc_by_domain"], key=int)
    header = ["round", "acc_avg", "loss_ce", "loss_triplet", "loss_reg"] + [f"acc_domain_{d}" for d in domains]
    rows = [
        [r["round"], r["acc_avg"], r["loss_ce"], r["loss_triplet"], r["loss_reg"]] + [r["acc_by_domain"][d] for d in domains]
        for r in records
    ]
    _emit_table(header, rows, args.out)
    return EXIT_OK


def _emit_table(header, rows, out_path) -> None:
    fh = open(out_path, "w", newline="") if out_path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if out_path:
            fh.close()
    if out_path:
        print(f"wrote {out_path} ({len(rows)} rows)")


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [federation] [trainer] [model] [style] sections")
    g = p.add_argument_group("overrides (take precedence over --config)")
    g.add_argument("--clients", type=int)
    g.add_argument("--sample-frac", type=float)
    g.add_argument("--rounds", type=int)
    g.add_argument("--lam", type=float)
    g.add_argument("--scheme", choices=["LODO", "LTDO"])
    g.add_argument("--train-domains", type=_int_list)
    g.add_argument("--eval-domains", type=_int_list)
    g.add_argument("--seed", type=int)
    g.add_argument("--checkpoint-every", type=int)
    g.add_argument("--gamma1", type=float)
    g.add_argument("--gamma2", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--local-epochs", type=int)
    g.add_argument("--local-clustering", choices=["finch", "mean"])
    g.add_argument("--global-clustering", choices=["finch", "mean"])
    g.add_argument("--channels", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedstyle", description="Federated domain generalization simulator with style interpolation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-domain dataset")
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--classes", type=int, default=7)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("partition", help="dump per-client domain counts for a given lambda")
    p.add_argument("--data", required=True)
    p.add_argument("--clients", type=int, default=20)
    p.add_argument("--lam", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domains", type=_int_list, help="restrict to these domain ids")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("cluster", help="run FINCH over vectors in a CSV file, one vector per row")
    p.add_argument("--input", required=True)
    p.add_argument("--metric", choices=["cosine", "euclidean"], default="cosine")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("styles", help="compute client style reports and the interpolation style")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="binary style report file")
    _add_overrides(p)
    p.set_defaults(func=cmd_styles)

    p = sub.add_parser("train", help="run the federated simulation")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    _add_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on chosen domains")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domains", type=_int_list, required=True)
    p.add_argument("--manifest", help="run manifest (default: manifest.json next to the checkpoint)")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="convert a metrics JSONL file into a plot-ready CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args.data_domains = getattr(args, "data_domains", None)
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"error: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
