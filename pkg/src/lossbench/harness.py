"""Training loop, transductive/inductive protocols and the cached experiment matrix."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import Tape, backward
from .encoders import EncoderSpec, ParameterSet, adapt_params, bind, encode, forward, init_params
from .graph import Graph, load_elliptic_csv, load_node_table, planted_partition, subgraph_sample
from .losses import HybridLossSpec, LossContext, enumerate_hybrids, init_loss_params, total_loss
from .metrics import METRIC_IDS, MetricVector, ProbeConfig, evaluate_all
from .optim import Adam
from .ranking import MetricRow, MetricTable

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

DATA_DIR_ENV = "LOSSBENCH_DATA_DIR"
CACHE_DIR_ENV = "LOSSBENCH_CACHE_DIR"


class DatasetNotFound(FileNotFoundError):
    pass


@dataclass
class ExperimentConfig:
    datasets: list = field(default_factory=lambda: ["cora"])
    pairs: list = field(default_factory=list)
    setting: str = "transductive"
    architectures: list = field(default_factory=lambda: ["GCN", "GAT", "SAGE", "GIN", "PAGNN", "MPNN", "ALL"])
    max_order: int = 5
    losses: list = field(default_factory=list)
    exclude_losses: list = field(default_factory=list)
    epochs: int = 500
    patience: int = 10
    min_delta: float = 1e-6
    embed_dim: int = 128
    hidden_dim: int = 128
    layers: int = 2
    d_h: int = 256
    attention_heads: int = 4
    pe_dim: int = 8
    sample_size: int = 10
    fusion: str = "sum"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seeds: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    margin: float = 0.5
    dae_sigma: float = 0.1
    negatives: int = 1
    anchor_count: int = 512
    probe_hidden: int = 64
    probe_epochs: int = 200
    probe_lr: float = 0.01
    probe_repeats: int = 5
    lp_holdout: float = 0.10
    knn_k: int = 10
    strict_protocol: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.patience < 1:
            raise ValueError("epochs and patience must be >= 1")
        if self.setting not in ("transductive", "inductive"):
            raise ValueError(f"setting must be transductive or inductive, got {self.setting!r}")
        if self.strict_protocol and self.embed_dim != 128:
            raise ValueError("the benchmark protocol fixes embed_dim at 128")
        for p in self.pairs:
            if _dataset_key(p[0]) == _dataset_key(p[1]):
                raise ValueError(f"inductive pair {p} uses the same dataset twice")

    def encoder_spec(self, arch: str) -> EncoderSpec:
        return EncoderSpec(arch, self.layers, self.hidden_dim, self.embed_dim, self.d_h, None,
                           self.attention_heads, True, self.pe_dim, self.sample_size, self.fusion,
                           self.strict_protocol)

    def loss_context(self) -> LossContext:
        return LossContext(self.margin, self.dae_sigma, self.negatives, self.anchor_count)

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(hidden=self.probe_hidden, epochs=self.probe_epochs, lr=self.probe_lr,
                           repeats=self.probe_repeats, holdout=self.lp_holdout, knn_k=self.knn_k)

    def loss_specs(self) -> list:
        if self.losses:
            specs = [HybridLossSpec.parse(n) for n in self.losses]
        else:
            specs = enumerate_hybrids(self.max_order)
        skip = {HybridLossSpec.parse(n).name for n in self.exclude_losses}
        return [s for s in specs if s.name not in skip]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    raw = p.read_bytes()
    if p.suffix.lower() == ".toml":
        data = tomllib.loads(raw.decode("utf-8"))
    else:
        data = json.loads(raw.decode("utf-8"))
    return ExperimentConfig.from_dict(data)


# datasets

def _dataset_key(spec) -> str:
    if isinstance(spec, str):
        return spec
    return json.dumps(spec, sort_keys=True)


def dataset_label(spec) -> str:
    if isinstance(spec, str):
        return spec.split(":", 1)[0] if ":" in spec and not spec.startswith("synthetic") else spec
    return spec.get("name") or spec.get("kind", "dataset")


def parse_dataset_spec(text: str):
    """`cora`, `node_table:<nodes>,<edges>`, `elliptic:<feat>,<edges>,<classes>[,sample=N]`,
    `synthetic:n=..,classes=..` or a path to a JSON dataset description."""
    if text.endswith(".json") and Path(text).is_file():
        return json.loads(Path(text).read_text(encoding="utf-8"))
    if ":" not in text:
        return {"kind": "named", "name": text}
    kind, rest = text.split(":", 1)
    parts = [p for p in rest.split(",") if p]
    opts = dict(p.split("=", 1) for p in parts if "=" in p)
    paths = [p for p in parts if "=" not in p]
    if kind == "node_table":
        return {"kind": kind, "nodes": paths[0], "edges": paths[1], **opts}
    if kind == "elliptic":
        return {"kind": kind, "features": paths[0], "edges": paths[1], "classes": paths[2], **opts}
    if kind == "synthetic":
        return {"kind": kind, **opts}
    raise ValueError(f"unknown dataset kind {kind!r}")


NAMED_LAYOUTS = {
    "cora": [("nodes.tsv", "edges.tsv"), ("cora.content", "cora.cites")],
    "citeseer": [("nodes.tsv", "edges.tsv"), ("citeseer.content", "citeseer.cites")],
}
ELLIPTIC_FILES = ("elliptic_txs_features.csv", "elliptic_txs_edgelist.csv", "elliptic_txs_classes.csv")


def _named(name: str) -> dict:
    root = Path(os.environ.get(DATA_DIR_ENV, "data"))
    key = name.lower()
    base = root / key
    if key in NAMED_LAYOUTS:
        for nodes, edges in NAMED_LAYOUTS[key]:
            if (base / nodes).is_file() and (base / edges).is_file():
                return {"kind": "node_table", "nodes": str(base / nodes), "edges": str(base / edges), "name": key}
    elif key == "elliptic":
        files = [base / f for f in ELLIPTIC_FILES]
        if all(f.is_file() for f in files):
            return {"kind": "elliptic", "features": str(files[0]), "edges": str(files[1]),
                    "classes": str(files[2]), "name": key, "sample": 5000}
    raise DatasetNotFound(
        f"dataset {name!r} not found under {base}; set {DATA_DIR_ENV} to a directory holding "
        f"{key}/nodes.tsv + {key}/edges.tsv (or the original release files)")


_LOADED: dict = {}


def load_dataset(spec) -> Graph:
    if isinstance(spec, str):
        spec = parse_dataset_spec(spec)
    key = json.dumps(spec, sort_keys=True)
    if key in _LOADED:
        return _LOADED[key]
    kind = spec.get("kind", "named")
    if kind == "named":
        g = load_dataset(_named(spec["name"]))
    elif kind == "node_table":
        g = load_node_table(spec["nodes"], spec["edges"], spec.get("name"))
    elif kind == "elliptic":
        g = load_elliptic_csv(spec["features"], spec["edges"], spec["classes"], spec.get("name", "elliptic"))
        sample = int(spec.get("sample", 5000))
        if sample and sample < g.n:
            g = subgraph_sample(g, sample, int(spec.get("sample_seed", 0)))
    elif kind == "synthetic":
        g = planted_partition(int(spec.get("n", 60)), int(spec.get("classes", 3)), int(spec.get("d_in", 8)),
                              float(spec.get("p_in", 0.3)), float(spec.get("p_out", 0.02)),
                              int(spec.get("seed", 0)), float(spec.get("signal", 1.0)),
                              spec.get("name", "synthetic"))
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    _LOADED[key] = g
    return g


# training

class EarlyStopping:
    """Stops after `patience` consecutive epochs without a decrease larger than `min_delta`."""

    def __init__(self, patience=10, min_delta=1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.bad = 0
        self.epoch = 0

    def update(self, value) -> bool:
        """Record one epoch's loss; True when training should stop."""
        self.epoch += 1
        if value < self.best - self.min_delta:
            self.best = value
            self.best_epoch = self.epoch
            self.bad = 0
            return False
        self.bad += 1
        return self.bad >= self.patience

    @property
    def improved(self):
        return self.bad == 0


@dataclass
class TrainResult:
    params: ParameterSet
    Z: np.ndarray
    curve: list
    epochs_run: int
    best_epoch: int
    flags: list = field(default_factory=list)
    gate_trace: list = field(default_factory=list)


def epoch_seed(seed, epoch):
    return int(seed) * 1_000_003 + int(epoch)


def train(config: ExperimentConfig, g: Graph, arch: str, loss_spec, seed: int,
          spec: EncoderSpec | None = None, params: ParameterSet | None = None) -> TrainResult:
    spec = spec or config.encoder_spec(arch)
    loss_spec = loss_spec if isinstance(loss_spec, HybridLossSpec) else HybridLossSpec.parse(loss_spec)
    ctx = config.loss_context()
    if params is None:
        params = init_params(spec, g.d_in, seed)
        params.tensors.update(init_loss_params(loss_spec, spec.embed_dim, seed))
    opt = Adam(config.lr, (config.beta1, config.beta2), config.adam_eps)
    stop = EarlyStopping(config.patience, config.min_delta)
    best = params.copy()
    curve, gate_trace, flags = [], [], []
    values = dict(params.tensors)
    for epoch in range(1, config.epochs + 1):
        tape = Tape()
        pv = bind(tape, spec, ParameterSet(values, params.init_seed))
        for name, val in values.items():
            if name not in pv:
                pv[name] = tape.param(name, val)
        es = epoch_seed(seed, epoch)
        Z = forward(spec, pv, g, es)
        loss, _ = total_loss(loss_spec, Z, pv, g, ctx, es)
        val = float(loss.value)
        if not math.isfinite(val):
            flags.append(f"nonfinite_loss@{epoch}")
            log.warning("non-finite loss at epoch %d (%s, %s); run aborted", epoch, arch, loss_spec.name)
            break
        curve.append(val)
        halt = stop.update(val)
        if stop.improved:
            best = ParameterSet({k: v.copy() for k, v in values.items()}, params.init_seed)
        gate_trace.append({m: float(1.0 / (1.0 + np.exp(-values[f"gate.{m}"][0, 0]))) for m in loss_spec.members})
        if halt:
            break
        grads = backward(tape, loss)
        opt.step(values, grads)
    Z = encode(spec, best, g, seed)
    if not np.all(np.isfinite(Z)):
        flags.append("nonfinite_embedding")
    return TrainResult(best, Z, curve, len(curve), stop.best_epoch, flags, gate_trace)


@dataclass
class SeedRun:
    seed: int
    metrics: MetricVector
    train_flags: list


@dataclass
class Aggregate:
    mean: dict
    std: dict
    runs: list


def aggregate_runs(runs) -> Aggregate:
    mean, std = {}, {}
    for m in METRIC_IDS:
        xs = np.array([r.metrics.values[m] for r in runs], dtype=np.float64)
        mean[m] = float(np.mean(xs))
        std[m] = float(np.std(xs))
    return Aggregate(mean, std, list(runs))


def run_transductive(config, g: Graph, arch, loss_spec, seeds) -> Aggregate:
    runs = []
    for s in seeds:
        tr = train(config, g, arch, loss_spec, s)
        mv = evaluate_all(tr.Z, g, config.probe_config(), s)
        runs.append(SeedRun(s, mv, tr.flags))
    return aggregate_runs(runs)


def apply_encoder(config, arch, params: ParameterSet, g: Graph, seed) -> np.ndarray:
    spec = config.encoder_spec(arch)
    return encode(spec, adapt_params(spec, params, g.d_in), g, seed)


def run_inductive(config, pretrain_g: Graph, apply_g: Graph, arch, loss_spec, seeds) -> Aggregate:
    runs = []
    for s in seeds:
        tr = train(config, pretrain_g, arch, loss_spec, s)
        Z = apply_encoder(config, arch, tr.params, apply_g, s)
        mv = evaluate_all(Z, apply_g, config.probe_config(), s)
        runs.append(SeedRun(s, mv, tr.flags))
    return aggregate_runs(runs)


def inductive_key(pre: str, app: str) -> str:
    return f"{pre} ↓ {app}"


# experiment matrix

@dataclass(frozen=True)
class Cell:
    arch: str
    loss: str
    dataset: object
    apply: object
    seed: int

    @property
    def dataset_name(self):
        if self.apply is None:
            return dataset_label(self.dataset)
        return inductive_key(dataset_label(self.dataset), dataset_label(self.apply))


def matrix_cells(config: ExperimentConfig) -> list:
    cells = []
    if config.setting == "transductive":
        targets = [(d, None) for d in config.datasets]
    else:
        targets = [(p[0], p[1]) for p in config.pairs]
    for arch in config.architectures:
        for spec in config.loss_specs():
            for d, a in targets:
                for s in config.seeds:
                    cells.append(Cell(arch, spec.name, d, a, int(s)))
    return cells


_CELL_KEYS = ("epochs", "patience", "min_delta", "embed_dim", "hidden_dim", "layers", "d_h", "attention_heads",
              "pe_dim", "sample_size", "fusion", "lr", "beta1", "beta2", "adam_eps", "margin", "dae_sigma",
              "negatives", "anchor_count", "probe_hidden", "probe_epochs", "probe_lr", "probe_repeats",
              "lp_holdout", "knn_k", "setting")


def cell_hash(config: ExperimentConfig, cell: Cell) -> str:
    cfg = config.to_dict()
    doc = {"config": {k: cfg[k] for k in _CELL_KEYS}, "arch": cell.arch, "loss": cell.loss,
           "dataset": cell.dataset, "apply": cell.apply, "seed": cell.seed, "version": __version__}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def run_cell(config: ExperimentConfig, cell: Cell) -> MetricRow:
    flags = []
    try:
        g = load_dataset(cell.dataset)
        tr = train(config, g, cell.arch, cell.loss, cell.seed)
        flags += tr.flags
        if cell.apply is None:
            target, Z = g, tr.Z
        else:
            target = load_dataset(cell.apply)
            Z = apply_encoder(config, cell.arch, tr.params, target, cell.seed)
        mv = evaluate_all(Z, target, config.probe_config(), cell.seed)
        values = dict(mv.values)
        if mv.flags:
            flags.append(mv.flag_string())
    except Exception as exc:  # a failed cell is reported, not fatal
        log.warning("cell %s failed: %s", cell, exc)
        values = {m: math.nan for m in METRIC_IDS}
        flags.append(f"cell_failed({type(exc).__name__}: {exc})".replace(",", " ").replace(";", " "))
    return MetricRow(cell.arch, cell.loss, cell.dataset_name, config.setting, str(cell.seed), values,
                     ";".join(flags))


def _row_to_json(row: MetricRow) -> str:
    d = asdict(row)
    d["values"] = {k: repr(float(v)) for k, v in row.values.items()}
    return json.dumps(d, sort_keys=True)


def _row_from_json(text: str) -> MetricRow:
    d = json.loads(text)
    d["values"] = {k: float(v) for k, v in d["values"].items()}
    return MetricRow(**d)


def _worker(args):
    config_dict, cell = args
    return run_cell(ExperimentConfig.from_dict(config_dict), cell)


@dataclass
class MatrixStats:
    computed: int = 0
    cached: int = 0


def cache_dir_for(cache_dir=None) -> Path:
    if cache_dir is not None:
        return Path(cache_dir)
    return Path(os.environ.get(CACHE_DIR_ENV, Path.home() / ".cache" / "lossbench"))


def run_matrix(config: ExperimentConfig, cache_dir=None, workers=1, stats: MatrixStats | None = None,
               use_cache=True) -> MetricTable:
    """Every (architecture, loss, dataset or pair, seed) cell; completed cells are read back from the cache."""
    cells = matrix_cells(config)
    cdir = cache_dir_for(cache_dir)
    if use_cache:
        cdir.mkdir(parents=True, exist_ok=True)
    stats = stats if stats is not None else MatrixStats()
    results: dict = {}
    todo = []
    for i, cell in enumerate(cells):
        path = cdir / f"{cell_hash(config, cell)}.json"
        if use_cache and path.is_file():
            results[i] = _row_from_json(path.read_text(encoding="utf-8"))
            stats.cached += 1
        else:
            todo.append((i, cell, path))

    def store(i, path, row):
        results[i] = row
        stats.computed += 1
        if use_cache:
            tmp = path.with_suffix(".tmp")
            tmp.write_text(_row_to_json(row), encoding="utf-8")
            os.replace(tmp, path)

    if workers > 1 and len(todo) > 1:
        cfg = config.to_dict()
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for (i, cell, path), row in zip(todo, pool.map(_worker, [(cfg, c) for _, c, _ in todo])):
                store(i, path, row)
    else:
        for i, cell, path in todo:
            store(i, path, run_cell(config, cell))
    return MetricTable([results[i] for i in range(len(cells))])
