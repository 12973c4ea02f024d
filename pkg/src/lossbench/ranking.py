"""Per-metric average ranks, AvgRank/Coverage/Top1Wins summaries and report emitters."""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .metrics import HIGHER_IS_BETTER, METRIC_IDS


@dataclass
class RankSummary:
    model: str
    loss: str
    avg_rank: float
    coverage: int
    top1_wins: int


@dataclass
class RankResult:
    rows: list
    flags: dict = field(default_factory=dict)


@dataclass
class MetricRow:
    model: str
    loss: str
    dataset: str
    setting: str
    seed: str
    values: dict
    flags: str = ""


@dataclass
class MetricTable:
    rows: list = field(default_factory=list)

    def to_csv_text(self) -> str:
        from .metrics import CSV_HEADER, format_value
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.model, r.loss, r.dataset, r.setting, r.seed,
                        *[format_value(r.values.get(m, math.nan)) for m in METRIC_IDS], r.flags])
        return buf.getvalue()

    def write_csv(self, path):
        Path(path).write_text(self.to_csv_text(), encoding="utf-8")

    @classmethod
    def from_csv_text(cls, text: str) -> "MetricTable":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            vals = {m: float(rec[m]) for m in METRIC_IDS if m in rec and rec[m] != ""}
            rows.append(MetricRow(rec["model"], rec["loss"], rec["dataset"], rec["setting"], rec["seed"],
                                  vals, rec.get("flags", "")))
        return cls(rows)

    @classmethod
    def read_csv(cls, path) -> "MetricTable":
        return cls.from_csv_text(Path(path).read_text(encoding="utf-8"))


def dataset_ranks(values: dict, higher_is_better: bool) -> dict:
    """Rank 1 = best; ties share the average rank. NaN entries are left out."""
    keys = [k for k, v in values.items() if not math.isnan(v)]
    if not keys:
        return {}
    arr = np.array([values[k] for k in keys])
    ranks = rankdata(-arr if higher_is_better else arr, method="average")
    return dict(zip(keys, ranks.tolist()))


def per_metric_average_ranks(table: MetricTable, metrics=METRIC_IDS):
    """metric -> {(model, loss): rank averaged over datasets}; seeds are averaged first.

    Returns (ranks, flags) where flags notes (model, loss) cells missing for a metric.
    """
    acc = defaultdict(list)
    for r in table.rows:
        for m in metrics:
            v = r.values.get(m, math.nan)
            acc[(m, r.dataset, r.model, r.loss)].append(v)
    pairs = sorted({(r.model, r.loss) for r in table.rows})
    datasets = sorted({r.dataset for r in table.rows})
    out, flags = {}, {}
    for m in metrics:
        per_pair = defaultdict(list)
        for ds in datasets:
            vals = {}
            for p in pairs:
                xs = acc.get((m, ds, p[0], p[1]))
                if xs:
                    finite = [x for x in xs if not math.isnan(x)]
                    vals[p] = float(np.mean(finite)) if finite else math.nan
            for p, rk in dataset_ranks(vals, HIGHER_IS_BETTER.get(m, True)).items():
                per_pair[p].append(rk)
        missing = [p for p in pairs if p not in per_pair]
        if missing:
            flags[m] = f"missing {len(missing)} cells"
        out[m] = {p: float(np.mean(v)) for p, v in per_pair.items()}
    return out, flags


def aggregate_ranks(per_metric, top_k=3, precision=1) -> RankResult:
    """Summaries from per-metric average ranks.

    `per_metric` maps metric -> {(model, loss): avg_rank} (or a MetricTable).
    Average ranks are rounded to `precision` decimals (None keeps them exact),
    rows are ordered by (rank, loss, model) and the first `top_k` are covered.
    A metric whose best rank is shared by more than `top_k` rows carries no
    ordering information and is skipped with a flag.
    """
    flags = {}
    if isinstance(per_metric, MetricTable):
        per_metric, flags = per_metric_average_ranks(per_metric)
    if not per_metric:
        raise ValueError("rank aggregation needs at least one metric")
    covered = defaultdict(list)
    top1 = defaultdict(int)
    for metric in sorted(per_metric):
        entries = per_metric[metric]
        if not entries:
            flags[metric] = "empty"
            continue
        rows = []
        for (model, loss), rk in entries.items():
            r = round(rk, precision) if precision is not None else rk
            rows.append((r, loss, model))
        rows.sort()
        best = rows[0][0]
        tied = sum(1 for r in rows if r[0] == best)
        if tied > top_k:
            flags[metric] = f"{tied} rows tied at rank {best}; skipped"
            continue
        for pos, (r, loss, model) in enumerate(rows[:top_k]):
            covered[(model, loss)].append(r)
            if pos == 0:
                top1[(model, loss)] += 1
    out = [RankSummary(model, loss, float(np.mean(rs)), len(rs), top1[(model, loss)])
           for (model, loss), rs in covered.items()]
    out.sort(key=lambda s: (s.avg_rank, -s.coverage, s.loss, s.model))
    return RankResult(out, flags)


def read_metric_tables(directory) -> dict:
    """Directory of <metric>.csv files with columns model, loss and either avg_rank or per-dataset scores."""
    out = {}
    for path in sorted(Path(directory).glob("*.csv")):
        metric = path.stem
        with path.open(encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            cols = reader.fieldnames or []
            if not {"model", "loss"} <= set(cols):
                continue
            recs = list(reader)
        if "avg_rank" in cols:
            out[metric] = {(r["model"], r["loss"]): float(r["avg_rank"]) for r in recs}
            continue
        datasets = [c for c in cols if c not in ("model", "loss")]
        per_pair = defaultdict(list)
        for ds in datasets:
            vals = {(r["model"], r["loss"]): float(r[ds]) if r[ds] != "" else math.nan for r in recs}
            for p, rk in dataset_ranks(vals, HIGHER_IS_BETTER.get(metric, True)).items():
                per_pair[p].append(rk)
        out[metric] = {p: float(np.mean(v)) for p, v in per_pair.items()}
    return out


def load_rank_input(path):
    """A metric-table CSV, or a directory of per-metric CSVs."""
    p = Path(path)
    if p.is_dir():
        tables = read_metric_tables(p)
        if tables:
            return tables
        csvs = sorted(p.glob("*.csv"))
        if not csvs:
            raise FileNotFoundError(f"no CSV tables under {p}")
        merged = MetricTable()
        for c in csvs:
            merged.rows.extend(MetricTable.read_csv(c).rows)
        return merged
    return MetricTable.read_csv(p)


SUMMARY_HEADER = ["model", "loss", "avg_rank", "coverage", "top1_wins"]


def summary_csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for s in rows:
        w.writerow([s.model, s.loss, repr(float(s.avg_rank)), s.coverage, s.top1_wins])
    return buf.getvalue()


def read_summary_csv(text: str) -> list:
    return [RankSummary(r["model"], r["loss"], float(r["avg_rank"]), int(r["coverage"]), int(r["top1_wins"]))
            for r in csv.DictReader(io.StringIO(text))]


def display(x: float) -> str:
    """Two decimals, round-half-even on the stored binary value."""
    if isinstance(x, float) and (math.isnan(x) or math.isinf(x)):
        return str(x)
    return f"{x:.2f}"


def summary_markdown(rows) -> str:
    lines = ["| Model | Loss | AvgRank | Coverage | Top1Wins |", "|---|---|---|---|---|"]
    for s in rows:
        lines.append(f"| {s.model} | {s.loss} | {display(s.avg_rank)} | {s.coverage} | {s.top1_wins} |")
    return "\n".join(lines) + "\n"


def metric_table_markdown(metric, entries: dict, limit=10) -> str:
    rows = sorted(((rk, loss, model) for (model, loss), rk in entries.items()))[:limit]
    lines = [f"### {metric}", "", "| Loss | Model | Average Rank |", "|---|---|---|"]
    for rk, loss, model in rows:
        lines.append(f"| {loss} | {model} | {display(rk)} |")
    return "\n".join(lines) + "\n"


def emit_report(summary: RankResult, tables: dict, out_dir, fmt="markdown", header: dict | None = None):
    """Writes summary and per-metric tables; returns the written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    written = []
    if fmt == "csv":
        p = out / "rank_summary.csv"
        p.write_text(summary_csv_text(summary.rows), encoding="utf-8")
        written.append(p)
        for metric, entries in sorted(tables.items()):
            q = out / f"ranks_{metric}.csv"
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["model", "loss", "avg_rank"])
            for (model, loss), rk in sorted(entries.items(), key=lambda kv: (kv[1], kv[0][1], kv[0][0])):
                w.writerow([model, loss, repr(float(rk))])
            q.write_text(buf.getvalue(), encoding="utf-8")
            written.append(q)
    elif fmt == "markdown":
        parts = []
        if header:
            parts.append("<!-- " + " ".join(f"{k}={v}" for k, v in sorted(header.items())) + " -->\n")
        parts.append("## Summary\n\n" + summary_markdown(summary.rows))
        if summary.flags:
            parts.append("\n".join(f"- {k}: {v}" for k, v in sorted(summary.flags.items())) + "\n")
        for metric, entries in sorted(tables.items()):
            parts.append(metric_table_markdown(metric, entries))
        p = out / "report.md"
        p.write_text("\n".join(parts), encoding="utf-8")
        written.append(p)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return written
