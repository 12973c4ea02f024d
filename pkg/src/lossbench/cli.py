"""Command-line entry point: ingest, train, eval, matrix, rank, report."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .encoders import adapt_params, encode, load_checkpoint, save_checkpoint, spec_from_dict, spec_to_dict
from .harness import DatasetNotFound, ExperimentConfig, load_config, load_dataset, run_matrix, train
from .losses import HybridLossSpec
from .metrics import CSV_HEADER, evaluate_all, metric_row
from .ranking import aggregate_ranks, emit_report, load_rank_input, per_metric_average_ranks, summary_csv_text

log = logging.getLogger("lossbench")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "epochs", None) is not None:
        d = cfg.to_dict()
        d["epochs"] = args.epochs
        cfg = ExperimentConfig.from_dict(d)
    return cfg


def _write(text: str, out):
    if out in (None, "-"):
        sys.stdout.write(text)
        return
    p = Path(out)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text, encoding="utf-8")


def cmd_ingest(args):
    g = load_dataset(args.dataset)
    info = {"name": g.name, "nodes": g.n, "edges": g.num_edges, "d_in": g.d_in}
    if g.has_labels:
        labeled = g.labels[g.labels >= 0]
        counts = np.bincount(labeled)
        info.update(labeled=int(labeled.size), classes=int(counts.size),
                    class_counts=counts.tolist(), majority_baseline=round(100.0 * counts.max() / labeled.size, 4))
    print(json.dumps(info, sort_keys=True))
    return 0


def cmd_train(args):
    cfg = _config(args)
    g = load_dataset(args.dataset)
    spec = cfg.encoder_spec(args.arch)
    loss = HybridLossSpec.parse(args.loss)
    t0 = time.perf_counter()
    res = train(cfg, g, args.arch, loss, args.seed, spec=spec)
    elapsed = time.perf_counter() - t0
    meta = {"spec": spec_to_dict(spec), "loss": loss.name, "dataset": args.dataset, "seed": args.seed,
            "config": cfg.to_dict(), "version": __version__}
    save_checkpoint(args.out, res.params, meta)
    gates = res.gate_trace[-1] if res.gate_trace else {}
    print(json.dumps({"checkpoint": str(args.out), "epochs_run": res.epochs_run, "best_epoch": res.best_epoch,
                      "initial_loss": res.curve[0] if res.curve else None,
                      "final_loss": res.curve[-1] if res.curve else None,
                      "gates": gates, "flags": res.flags, "seconds": round(elapsed, 2)}, sort_keys=True))
    return 0 if not res.flags else 3


def cmd_eval(args):
    params, meta = load_checkpoint(args.ckpt)
    spec = spec_from_dict(meta["spec"])
    g = load_dataset(args.dataset)
    seed = args.seed if args.seed is not None else int(meta.get("seed", 0))
    cfg = ExperimentConfig.from_dict(meta["config"]) if "config" in meta else ExperimentConfig()
    Z = encode(spec, adapt_params(spec, params, g.d_in), g, seed)
    mv = evaluate_all(Z, g, cfg.probe_config(), seed)
    pre = meta.get("dataset", "")
    setting = "transductive" if pre == args.dataset else "inductive"
    row = metric_row(spec.architecture, meta.get("loss", ""), args.dataset, setting, seed, mv)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerow(row)
    _write(buf.getvalue(), args.out)
    return 0


def cmd_matrix(args):
    cfg = load_config(args.config)
    table = run_matrix(cfg, cache_dir=args.cache_dir, workers=args.workers, use_cache=not args.no_cache)
    _write(table.to_csv_text(), args.out)
    return 0


def _rank(args):
    data = load_rank_input(args.tables)
    result = aggregate_ranks(data, top_k=args.top_k, precision=None if args.exact else args.precision)
    for metric, flag in sorted(result.flags.items()):
        log.warning("%s: %s", metric, flag)
    return data, result


def cmd_rank(args):
    _, result = _rank(args)
    _write(summary_csv_text(result.rows), args.out)
    return 0


def cmd_report(args):
    data, result = _rank(args)
    if not isinstance(data, dict):
        data, _ = per_metric_average_ranks(data)
    cfg = _config(args)
    header = {**{k: json.dumps(v, separators=(",", ":")) for k, v in asdict(cfg).items()},
              "top_k": args.top_k, "version": __version__}
    for p in emit_report(result, data, args.out, args.format, header):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lossbench", description=__doc__)
    ap.add_argument("--version", action="version", version=f"lossbench {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load a dataset and print its statistics")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one encoder and write a checkpoint")
    p.add_argument("--arch", required=True)
    p.add_argument("--loss", required=True, help="base loss or hybrid such as 'Contr_l + PMI_L'")
    p.add_argument("--dataset", required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--epochs", type=int)
    p.add_argument("--config")
    p.add_argument("--out", default="encoder.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="embed a dataset with a checkpoint and compute all metrics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", help="run the architecture x loss x dataset x seed matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="-")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--cache-dir")
    p.add_argument("--no-cache", action="store_true")
    p.set_defaults(func=cmd_matrix)

    for name, helptext in (("rank", "aggregate per-metric ranks into a summary CSV"),
                           ("report", "write summary and per-metric tables")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--tables", required=True, help="metric-table CSV or directory of per-metric CSVs")
        p.add_argument("--top-k", type=int, default=3)
        p.add_argument("--precision", type=int, default=1, help="decimals per-metric ranks are rounded to")
        p.add_argument("--exact", action="store_true", help="do not round per-metric ranks")
        if name == "rank":
            p.add_argument("--out", default="-")
            p.set_defaults(func=cmd_rank)
        else:
            p.add_argument("--format", choices=("csv", "markdown"), default="markdown")
            p.add_argument("--config")
            p.add_argument("--out", default="report")
            p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DatasetNotFound as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
