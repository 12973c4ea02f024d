"""Graph container, dataset loaders and structural precomputations."""
from __future__ import annotations

import csv
import logging
import weakref
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import eigsh

log = logging.getLogger(__name__)

NO_LABEL = -1

_DERIVED = weakref.WeakKeyDictionary()


def cached(g, key, build):
    """Memoise a structural quantity on an (immutable) graph."""
    slot = _DERIVED.setdefault(g, {})
    if key not in slot:
        slot[key] = build()
    return slot[key]


class GraphFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected, unweighted graph. `edges` holds each edge once with u < v."""

    n: int
    edges: np.ndarray
    adj: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""
    directed_source: bool = False
    node_ids: list | None = field(default=None, repr=False)

    @classmethod
    def from_edges(cls, n, edges, features=None, labels=None, name="", directed_source=False, node_ids=None):
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n):
            raise GraphFormatError(f"edge endpoint outside [0, {n})")
        e = e[e[:, 0] != e[:, 1]]
        e = np.sort(e, axis=1)
        e = np.unique(e, axis=0) if e.size else e.reshape(0, 2)
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        adj = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
        adj.sort_indices()
        if features is None:
            features = np.zeros((n, 1))
        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] != n:
            raise GraphFormatError(f"feature matrix has {features.shape[0]} rows for {n} nodes")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (n,):
                raise GraphFormatError("labels must have one entry per node")
        return cls(n, e, adj, features, labels, name, directed_source, node_ids)

    @property
    def num_edges(self):
        return len(self.edges)

    @property
    def d_in(self):
        return self.features.shape[1]

    @property
    def degrees(self):
        return np.diff(self.adj.indptr)

    def neighbors(self, i):
        return self.adj.indices[self.adj.indptr[i]:self.adj.indptr[i + 1]]

    @property
    def has_labels(self):
        return self.labels is not None and bool(np.any(self.labels >= 0))

    @property
    def num_classes(self):
        if not self.has_labels:
            return 0
        return int(self.labels.max()) + 1

    def with_edges(self, edges, name=None):
        return Graph.from_edges(self.n, edges, self.features, self.labels, name or self.name,
                                self.directed_source, self.node_ids)

    def edge_keys(self):
        """Sorted int64 keys u*n+v for both directions; used for fast membership tests."""
        coo = self.adj.tocoo()
        return np.sort(coo.row.astype(np.int64) * self.n + coo.col)


def _is_member(keys, n, u, v):
    q = np.asarray(u, dtype=np.int64) * n + np.asarray(v, dtype=np.int64)
    pos = np.searchsorted(keys, q)
    pos = np.minimum(pos, max(len(keys) - 1, 0))
    return (keys[pos] == q) if len(keys) else np.zeros(q.shape, dtype=bool)


def _labels_to_ids(raw):
    known = [r for r in raw if r is not None]
    try:
        vals = sorted({int(r) for r in known})
        key = {str(v): i for i, v in enumerate(vals)}
        to_key = lambda r: str(int(r))
    except ValueError:
        vals = sorted(set(known))
        key = {v: i for i, v in enumerate(vals)}
        to_key = lambda r: r
    return np.array([NO_LABEL if r is None else key[to_key(r)] for r in raw], dtype=np.int64)


def load_node_table(nodes_path, edges_path, name=None) -> Graph:
    """TSV node table (`id f0..f{d-1} label`, `-` for unlabeled) plus TSV edge list."""
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    ids, feats, raw_labels = [], [], []
    width = None
    with nodes_path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n\r")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if lineno == 1 and parts[0].lower() == "id":
                continue
            if width is None:
                width = len(parts)
                if width < 2:
                    raise GraphFormatError(f"{nodes_path}:{lineno}: need id and label columns")
            elif len(parts) != width:
                raise GraphFormatError(f"{nodes_path}:{lineno}: ragged row ({len(parts)} columns, expected {width})")
            ids.append(parts[0])
            try:
                feats.append([float(x) for x in parts[1:-1]])
            except ValueError as exc:
                raise GraphFormatError(f"{nodes_path}:{lineno}: bad feature value ({exc})") from None
            lab = parts[-1].strip()
            raw_labels.append(None if lab in ("-", "") else lab)
    index = {nid: i for i, nid in enumerate(ids)}
    if len(index) != len(ids):
        raise GraphFormatError(f"{nodes_path}: duplicate node ids")
    edges = []
    with edges_path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) < 2:
                raise GraphFormatError(f"{edges_path}:{lineno}: expected src and dst")
            src, dst = parts[0], parts[1]
            if src not in index or dst not in index:
                if lineno == 1 and (src.lower(), dst.lower()) == ("src", "dst"):
                    continue
                missing = src if src not in index else dst
                raise GraphFormatError(f"{edges_path}:{lineno}: dangling endpoint {missing!r}")
            edges.append((index[src], index[dst]))
    features = np.array(feats, dtype=np.float64).reshape(len(ids), (width or 2) - 2)
    return Graph.from_edges(len(ids), edges, features, _labels_to_ids(raw_labels),
                            name or nodes_path.stem, False, ids)


def load_elliptic_csv(features_path, edges_path, classes_path, name="elliptic") -> Graph:
    """Public Elliptic layout: headerless features keyed by txId, txId1/txId2 edges, txId/class labels."""
    ids, feats = [], []
    with open(features_path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            ids.append(row[0])
            feats.append([float(x) for x in row[1:]])
    index = {t: i for i, t in enumerate(ids)}
    labels = np.full(len(ids), NO_LABEL, dtype=np.int64)
    with open(classes_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            if not row or row[0] not in index:
                continue
            cls = row[1].strip()
            if cls == "1":
                labels[index[row[0]]] = 1
            elif cls == "2":
                labels[index[row[0]]] = 0
    edges = []
    with open(edges_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            a, b = row[0].strip(), row[1].strip()
            if a not in index or b not in index:
                raise GraphFormatError(f"{edges_path}:{lineno}: txId {a if a not in index else b} has no feature row")
            edges.append((index[a], index[b]))
    widths = {len(f) for f in feats}
    if len(widths) > 1:
        raise GraphFormatError(f"{features_path}: ragged feature rows")
    return Graph.from_edges(len(ids), edges, np.array(feats), labels, name, True, ids)


def induced_subgraph(g: Graph, nodes) -> Graph:
    nodes = np.sort(np.asarray(nodes, dtype=np.int64))
    remap = np.full(g.n, -1, dtype=np.int64)
    remap[nodes] = np.arange(len(nodes))
    e = g.edges
    keep = (remap[e[:, 0]] >= 0) & (remap[e[:, 1]] >= 0)
    sub_e = remap[e[keep]]
    labels = g.labels[nodes] if g.labels is not None else None
    ids = [g.node_ids[i] for i in nodes] if g.node_ids is not None else None
    return Graph.from_edges(len(nodes), sub_e, g.features[nodes], labels, g.name, g.directed_source, ids)


def subgraph_sample(g: Graph, target_n: int, seed: int) -> Graph:
    """Seeded BFS from a random labeled node; restarts from another labeled node if a component runs out."""
    if target_n > g.n:
        raise ValueError(f"target_n {target_n} exceeds graph size {g.n}")
    if not g.has_labels:
        raise ValueError("subgraph_sample needs at least one labeled node")
    rng = np.random.default_rng(seed)
    labeled = np.flatnonzero(g.labels >= 0)
    seen = np.zeros(g.n, dtype=bool)
    picked = []
    while len(picked) < target_n:
        pool = labeled[~seen[labeled]]
        if pool.size == 0:
            pool = np.flatnonzero(~seen)
        start = int(rng.choice(pool))
        seen[start] = True
        picked.append(start)
        queue = deque([start])
        while queue and len(picked) < target_n:
            u = queue.popleft()
            nbrs = g.neighbors(u).copy()
            rng.shuffle(nbrs)
            for v in nbrs:
                if not seen[v]:
                    seen[v] = True
                    picked.append(int(v))
                    queue.append(int(v))
                    if len(picked) == target_n:
                        break
    return induced_subgraph(g, picked)


def normalized_adjacency(g: Graph) -> sp.csr_matrix:
    """D^-1/2 (A + I) D^-1/2 with self-looped degrees."""
    a_hat = g.adj + sp.identity(g.n, format="csr")
    d = np.asarray(a_hat.sum(axis=1)).ravel()
    inv = 1.0 / np.sqrt(d)
    out = sp.diags(inv) @ a_hat @ sp.diags(inv)
    out = sp.csr_matrix(out)
    out.sort_indices()
    return out


@dataclass
class PageRankResult:
    scores: np.ndarray
    iterations: int
    converged: bool


def pagerank_detail(g: Graph, damping=0.85, tol=1e-8, max_iter=200) -> PageRankResult:
    if not 0 < damping < 1:
        raise ValueError("damping must lie in (0, 1)")
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = g.n
    deg = g.degrees.astype(np.float64)
    dangling = deg == 0
    inv = np.where(dangling, 0.0, 1.0 / np.where(dangling, 1.0, deg))
    pt = g.adj.T.tocsr()
    pi = np.full(n, 1.0 / n)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        nxt = damping * (pt @ (pi * inv) + pi[dangling].sum() / n) + (1.0 - damping) / n
        nxt /= nxt.sum()
        delta = np.abs(nxt - pi).sum()
        pi = nxt
        if delta < tol:
            converged = True
            break
    if not converged:
        log.warning("pagerank stopped at max_iter=%d without reaching tol=%g", max_iter, tol)
    return PageRankResult(pi, it, converged)


def pagerank(g: Graph, damping=0.85, tol=1e-8, max_iter=200) -> np.ndarray:
    return pagerank_detail(g, damping, tol, max_iter).scores


def normalized_laplacian(g: Graph) -> sp.csr_matrix:
    deg = g.degrees.astype(np.float64)
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    lap = sp.identity(g.n, format="csr") - sp.diags(inv) @ g.adj @ sp.diags(inv)
    return sp.csr_matrix(lap)


def laplacian_positional_encodings(g: Graph, k: int, zero_tol=1e-8) -> np.ndarray:
    """Eigenvectors of I - D^-1/2 A D^-1/2 for the k smallest nonzero eigenvalues.

    Columns are unit norm with their largest-magnitude entry positive. If the
    graph has fewer than k nonzero eigenvalues the trailing columns are zero.
    """
    if not 1 <= k < g.n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={g.n}")
    lap = normalized_laplacian(g)
    n_comp, comp = connected_components(g.adj, directed=False)
    n_zero = sum(1 for c in range(n_comp) if np.any(g.degrees[comp == c] > 0))
    want = n_zero + k
    if g.n <= 1000 or want >= g.n - 1:
        vals, vecs = np.linalg.eigh(lap.toarray())
    else:
        vals, vecs = eigsh(lap.tocsc(), k=want + 1, sigma=-1e-3, which="LM", tol=1e-12)
        order = np.argsort(vals, kind="stable")
        vals, vecs = vals[order], vecs[:, order]
    keep = np.flatnonzero(vals > zero_tol)[:k]
    out = np.zeros((g.n, k))
    for j, idx in enumerate(keep):
        v = vecs[:, idx] / np.linalg.norm(vecs[:, idx])
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        out[:, j] = v
    return out


def pmi_matrix(g: Graph, clip_negative=True) -> sp.csr_matrix:
    """log(p(i,j) / (p(i) p(j))) on the support of A + I; zero elsewhere."""
    a_hat = sp.csr_matrix(g.adj + sp.identity(g.n, format="csr"))
    total = a_hat.sum()
    r = np.asarray(a_hat.sum(axis=1)).ravel()
    coo = a_hat.tocoo()
    vals = np.log(coo.data * total / (r[coo.row] * r[coo.col]))
    if clip_negative:
        vals = np.maximum(vals, 0.0)
    out = sp.csr_matrix((vals, (coo.row, coo.col)), shape=(g.n, g.n))
    out.sort_indices()
    return out


def sample_negatives(g: Graph, anchors, k: int, seed: int, keys=None) -> np.ndarray:
    """k uniform non-neighbours per anchor by rejection sampling; shape (len(anchors), k)."""
    anchors = np.asarray(anchors, dtype=np.int64)
    if anchors.size == 0:
        return np.zeros((0, k), dtype=np.int64)
    deg = g.degrees[anchors]
    if np.any(deg >= g.n - 1):
        bad = int(anchors[np.argmax(deg >= g.n - 1)])
        raise ValueError(f"anchor {bad} is adjacent to every other node; no negative exists")
    if keys is None:
        keys = g.edge_keys()
    rng = np.random.default_rng(seed)
    out = np.empty((anchors.size, k), dtype=np.int64)
    u = np.repeat(anchors, k)
    todo = np.arange(u.size)
    flat = out.reshape(-1)
    while todo.size:
        cand = rng.integers(0, g.n, size=todo.size)
        bad = (cand == u[todo]) | _is_member(keys, g.n, u[todo], cand)
        flat[todo[~bad]] = cand[~bad]
        todo = todo[bad]
    return out


@dataclass
class EdgeSplit:
    train_edges: np.ndarray
    test_pos_edges: np.ndarray
    test_neg_pairs: np.ndarray
    ratio: float

    def train_graph(self, g: Graph) -> Graph:
        return g.with_edges(self.train_edges)


def edge_split(g: Graph, holdout=0.10, seed=0) -> EdgeSplit:
    if not 0 < holdout < 1:
        raise ValueError("holdout must lie in (0, 1)")
    m = g.num_edges
    n_test = max(1, int(round(holdout * m)))
    if n_test >= m:
        raise ValueError(f"holdout {holdout} would remove all {m} edges")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(m)
    test = g.edges[np.sort(perm[:n_test])]
    train = g.edges[np.sort(perm[n_test:])]
    max_neg = g.n * (g.n - 1) // 2 - m
    if max_neg < n_test:
        raise ValueError("not enough non-edges to balance the test split")
    keys = g.edge_keys()
    chosen = set()
    neg = []
    while len(neg) < n_test:
        need = n_test - len(neg)
        u = rng.integers(0, g.n, size=2 * need + 8)
        v = rng.integers(0, g.n, size=2 * need + 8)
        a, b = np.minimum(u, v), np.maximum(u, v)
        ok = (a != b) & ~_is_member(keys, g.n, a, b)
        for x, y in zip(a[ok], b[ok]):
            key = (int(x), int(y))
            if key not in chosen:
                chosen.add(key)
                neg.append(key)
                if len(neg) == n_test:
                    break
    return EdgeSplit(train, test, np.array(neg, dtype=np.int64).reshape(-1, 2), holdout)


def planted_partition(n, n_classes, d_in, p_in, p_out, seed, signal=1.0, name="synthetic") -> Graph:
    """Stochastic block model with class-shifted Gaussian features, for tests and demos."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    draw = rng.random((n, n)) < prob
    iu = np.triu_indices(n, 1)
    mask = draw[iu]
    edges = np.stack([iu[0][mask], iu[1][mask]], axis=1)
    centers = rng.normal(0.0, 1.0, size=(n_classes, d_in))
    feats = signal * centers[labels] + rng.normal(0.0, 1.0, size=(n, d_in))
    return Graph.from_edges(n, edges, feats, labels, name)
