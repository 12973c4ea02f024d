"""The 21-metric embedding evaluation suite plus the probes and clustering it relies on."""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import Tape
from .graph import EdgeSplit, Graph, cached, edge_split, pmi_matrix
from .optim import Adam
from .seeding import mix

log = logging.getLogger(__name__)

METRIC_IDS = (
    "node_cls_accuracy", "node_cls_precision", "node_cls_recall", "node_cls_f1",
    "LP_accuracy", "LP_precision", "LP_recall", "LP_f1", "LP_auroc", "LP_aupr", "LP_specificity",
    "cosine_adj_corr", "dot_adj_corr", "euclidean_adj_corr", "graph_reconstruction_bce_loss",
    "silhouette", "calinski_harabasz", "knn_consistency", "coherence", "selfCluster", "rankme",
)
LOWER_IS_BETTER = frozenset({"graph_reconstruction_bce_loss", "selfCluster"})
HIGHER_IS_BETTER = {m: m not in LOWER_IS_BETTER for m in METRIC_IDS}
UNSCALED = frozenset({"calinski_harabasz", "selfCluster", "rankme"})
CLS_METRICS = METRIC_IDS[:4]
LP_METRICS = METRIC_IDS[4:11]


class MetricError(ValueError):
    pass


# confusion-count arithmetic

@dataclass
class ConfusionCounts:
    tp: float
    tn: float
    fp: float
    fn: float

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    def accuracy(self):
        return (self.tp + self.tn) / self.total if self.total else 0.0

    def precision(self):
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    def recall(self):
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    def specificity(self):
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else 0.0

    def f1(self):
        p, r = self.precision(), self.recall()
        return 2 * p * r / (p + r) if p + r else 0.0


def binary_counts(y_true, y_pred) -> ConfusionCounts:
    t = np.asarray(y_true, dtype=bool)
    p = np.asarray(y_pred, dtype=bool)
    return ConfusionCounts(float(np.sum(t & p)), float(np.sum(~t & ~p)),
                           float(np.sum(~t & p)), float(np.sum(t & ~p)))


def classification_scores(y_true, y_pred, n_classes=None) -> dict:
    """Accuracy plus macro precision/recall/F1, all x100. Classes absent from y_true are skipped."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if n_classes is None:
        n_classes = int(max(y_true.max(), y_pred.max())) + 1
    precs, recs, f1s = [], [], []
    for c in range(n_classes):
        if not np.any(y_true == c):
            if np.any(y_pred == c):
                log.warning("class %d absent from evaluation labels; excluded from macro average", c)
            continue
        cc = binary_counts(y_true == c, y_pred == c)
        precs.append(cc.precision())
        recs.append(cc.recall())
        f1s.append(cc.f1())
    return {
        "accuracy": 100.0 * float(np.mean(y_true == y_pred)),
        "precision": 100.0 * float(np.mean(precs)),
        "recall": 100.0 * float(np.mean(recs)),
        "f1": 100.0 * float(np.mean(f1s)),
    }


# node classification probe

@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 64
    epochs: int = 200
    lr: float = 0.01
    repeats: int = 5
    fractions: tuple = (0.6, 0.2, 0.2)
    holdout: float = 0.10
    lp_threshold: float = 0.5
    knn_k: int = 10
    cluster_k: int | None = None
    default_cluster_k: int = 7
    kmeans_max_iter: int = 300


def stratified_split(labels, seed, fractions=(0.6, 0.2, 0.2)):
    """Per-class shuffled 60/20/20 style split over labeled nodes; returns three index arrays."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for c in np.unique(labels[labels >= 0]):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        n_tr = int(round(fractions[0] * idx.size))
        n_va = int(round(fractions[1] * idx.size))
        parts[0].append(idx[:n_tr])
        parts[1].append(idx[n_tr:n_tr + n_va])
        parts[2].append(idx[n_tr + n_va:])
    return tuple(np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64) for p in parts)


def _cross_entropy(logits, onehot):
    tape = logits.tape
    shift = tape.const(np.max(logits.value, axis=1, keepdims=True))
    z = logits - shift
    lse = ad.log(ad.tsum(ad.exp(z), axis=1, keepdims=True))
    return -ad.mean(ad.tsum((z - lse) * tape.const(onehot), axis=1))


def train_mlp_probe(X, y, n_classes, hidden, epochs, lr, seed, X_val=None, y_val=None):
    """One-hidden-layer ReLU classifier; keeps the weights with the best validation accuracy."""
    rng = np.random.default_rng(seed)
    d = X.shape[1]
    lim1 = math.sqrt(6.0 / (d + hidden))
    lim2 = math.sqrt(6.0 / (hidden + n_classes))
    params = {
        "W1": rng.uniform(-lim1, lim1, (d, hidden)), "b1": np.zeros((1, hidden)),
        "W2": rng.uniform(-lim2, lim2, (hidden, n_classes)), "b2": np.zeros((1, n_classes)),
    }
    onehot = np.eye(n_classes)[y]
    opt = Adam(lr=lr)
    best, best_acc = {k: v.copy() for k, v in params.items()}, -1.0
    for _ in range(epochs):
        tape = Tape()
        pv = {k: tape.param(k, v) for k, v in params.items()}
        h = ad.relu(tape.const(X) @ pv["W1"] + pv["b1"])
        loss = _cross_entropy(h @ pv["W2"] + pv["b2"], onehot)
        opt.step(params, ad.backward(tape, loss))
        if X_val is not None and len(y_val):
            acc = float(np.mean(mlp_predict(params, X_val) == y_val))
            if acc > best_acc:
                best_acc, best = acc, {k: v.copy() for k, v in params.items()}
    return best if X_val is not None and len(y_val) else params


def mlp_predict(params, X):
    h = np.maximum(X @ params["W1"] + params["b1"], 0.0)
    return np.argmax(h @ params["W2"] + params["b2"], axis=1)


def node_cls_probe(Z, labels, split=None, repeats=5, seed=0, config: ProbeConfig = ProbeConfig()):
    """Returns {accuracy, precision, recall, f1} -> (mean, std), x100."""
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    n_classes = int(labels.max()) + 1
    runs = {k: [] for k in ("accuracy", "precision", "recall", "f1")}
    for r in range(repeats):
        tr, va, te = split if split is not None else stratified_split(labels, mix(seed, r), config.fractions)
        if len(np.unique(labels[tr])) < 2 or len(np.unique(labels[te])) < 2:
            raise MetricError("probe needs at least two classes in both train and test")
        mu = Z[tr].mean(axis=0)
        sd = Z[tr].std(axis=0)
        sd[sd == 0] = 1.0
        Zs = (Z - mu) / sd
        params = train_mlp_probe(Zs[tr], labels[tr], n_classes, config.hidden, config.epochs, config.lr,
                                 mix(seed, r, 1), Zs[va], labels[va])
        scores = classification_scores(labels[te], mlp_predict(params, Zs[te]), n_classes)
        for k in runs:
            runs[k].append(scores[k])
    return {k: (float(np.mean(v)), float(np.std(v))) for k, v in runs.items()}


# link prediction

def auroc(scores, labels):
    """Mann-Whitney statistic with mid-ranks for ties, x100."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both positive and negative pairs")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return 100.0 * u / (n_pos * n_neg)


def aupr(scores, labels):
    """Step-wise area under the precision-recall curve (tied scores form one step), x100."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("AUPR needs at least one positive pair")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    pp = last + 1
    precision = tp / pp
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return 100.0 * float(np.sum((recall - prev) * precision))


def link_logits(Z, pairs):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return np.einsum("ij,ij->i", Z[pairs[:, 0]], Z[pairs[:, 1]])


def link_scores(Z, pairs):
    return expit(link_logits(Z, pairs))


def link_pred_eval(Z, split: EdgeSplit, threshold=0.5) -> dict:
    Z = np.asarray(Z, dtype=np.float64)
    if len(split.test_pos_edges) == 0 or len(split.test_neg_pairs) == 0:
        raise MetricError("empty link-prediction split")
    logits = np.concatenate([link_logits(Z, split.test_pos_edges), link_logits(Z, split.test_neg_pairs)])
    y = np.r_[np.ones(len(split.test_pos_edges), bool), np.zeros(len(split.test_neg_pairs), bool)]
    return link_metrics(expit(logits), y, threshold, rank_scores=logits)


def link_metrics(scores, labels, threshold=0.5, rank_scores=None) -> dict:
    """Threshold metrics on `scores`; AUROC/AUPR on `rank_scores` when given.

    The sigmoid saturates to exactly 1.0 for large logits, so ranking the
    logits themselves avoids spurious ties.
    """
    labels = np.asarray(labels, dtype=bool)
    cc = binary_counts(labels, np.asarray(scores) >= threshold)
    ranked = scores if rank_scores is None else rank_scores
    return {
        "LP_accuracy": 100.0 * cc.accuracy(),
        "LP_precision": 100.0 * cc.precision(),
        "LP_recall": 100.0 * cc.recall(),
        "LP_f1": 100.0 * cc.f1(),
        "LP_auroc": auroc(ranked, labels),
        "LP_aupr": aupr(ranked, labels),
        "LP_specificity": 100.0 * cc.specificity(),
    }


# similarity / adjacency correlation

def _similarity_block(Z, rows, kind, norms_sq):
    if kind == "dot":
        return Z[rows] @ Z.T
    if kind == "cosine":
        nrm = np.maximum(np.sqrt(norms_sq), ad.COS_EPS)
        return (Z[rows] / nrm[rows, None]) @ (Z / nrm[:, None]).T
    if kind == "euclidean":
        d2 = norms_sq[rows, None] + norms_sq[None, :] - 2.0 * (Z[rows] @ Z.T)
        return -np.maximum(d2, 0.0)
    raise ValueError(f"unknown similarity {kind!r}")


def adjacency_correlation(Z, g: Graph, kind: str):
    """Pearson correlation between upper-triangle similarities and A, x100. Returns (value, degenerate)."""
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    if n < 2:
        raise MetricError("correlation needs at least two nodes")
    norms_sq = np.einsum("ij,ij->i", Z, Z)
    block = max(1, min(n, 4_000_000 // max(n, 1)))
    cnt = 0.0
    shift = None
    ss = ss2 = sa = sa2 = ssa = 0.0
    for i0 in range(0, n, block):
        rows = np.arange(i0, min(n, i0 + block))
        S = _similarity_block(Z, rows, kind, norms_sq)
        A = g.adj[rows].toarray()
        mask = np.arange(n)[None, :] > rows[:, None]
        s = S[mask]
        a = A[mask]
        if s.size == 0:
            continue
        if shift is None:
            shift = float(s.mean())
        s = s - shift
        cnt += s.size
        ss += s.sum()
        ss2 += np.dot(s, s)
        sa += a.sum()
        sa2 += np.dot(a, a)
        ssa += np.dot(s, a)
    var_s = ss2 - ss * ss / cnt
    var_a = sa2 - sa * sa / cnt
    cov = ssa - ss * sa / cnt
    if var_a <= 0 or var_s <= 1e-24 * max(ss2, 1e-300) or var_s <= 0:
        return 0.0, True
    r = cov / math.sqrt(var_s * var_a)
    return 100.0 * max(-1.0, min(1.0, r)), False


def cosine_adj_corr(Z, g):
    return adjacency_correlation(Z, g, "cosine")[0]


def dot_adj_corr(Z, g):
    return adjacency_correlation(Z, g, "dot")[0]


def euclidean_adj_corr(Z, g):
    return adjacency_correlation(Z, g, "euclidean")[0]


# reconstruction

def bce(probs, labels):
    """Mean BCE; each log argument is floored at 1e-7 so a saturated correct score costs ~0, not 1e-7."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    lp = np.log(np.maximum(p, 1e-7))
    lq = np.log(np.maximum(1.0 - p, 1e-7))
    return float(np.mean(-(y * lp + (1 - y) * lq)))


def reconstruction_pairs(g: Graph, seed):
    """All edges plus |E| uniform ordered pairs (i != j), labelled from the adjacency."""
    rng = np.random.default_rng(seed)
    m = g.num_edges
    if m < 1:
        raise MetricError("reconstruction BCE needs at least one edge")
    u = rng.integers(0, g.n, size=m)
    v = rng.integers(0, g.n - 1, size=m)
    v = v + (v >= u)
    pairs = np.concatenate([g.edges, np.stack([u, v], axis=1)])
    labels = np.r_[np.ones(m), np.asarray(g.adj[u, v]).ravel() > 0]
    return pairs, labels


def reconstruction_bce(Z, g: Graph, sample=None, seed=0):
    pairs, labels = sample if sample is not None else reconstruction_pairs(g, seed)
    return 100.0 * bce(link_scores(np.asarray(Z, dtype=np.float64), pairs), labels)


# clustering

def _sq_dists(X, C):
    d = np.einsum("ij,ij->i", X, X)[:, None] + np.einsum("ij,ij->i", C, C)[None, :] - 2.0 * X @ C.T
    return np.maximum(d, 0.0)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    objective_trace: list = field(default_factory=list)
    iterations: int = 0


def kmeans_detail(Z, k, seed, max_iter=300) -> KMeansResult:
    X = np.asarray(Z, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise MetricError(f"k-means needs 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[chosen])[:, 0]
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    for _ in range(1, k):
        w = np.where(taken, 0.0, d2)
        if w.sum() > 0:
            nxt = int(rng.choice(n, p=w / w.sum()))
        else:
            nxt = int(rng.choice(np.flatnonzero(~taken)))
        chosen.append(nxt)
        taken[nxt] = True
        d2 = np.minimum(d2, _sq_dists(X, X[[nxt]])[:, 0])
    centers = X[chosen].copy()
    labels = np.argmin(_sq_dists(X, centers), axis=1)
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = X[members].mean(axis=0)
        D = _sq_dists(X, centers)
        new = np.argmin(D, axis=1)
        counts = np.bincount(new, minlength=k)
        for c in np.flatnonzero(counts == 0):
            dist_own = D[np.arange(n), new]
            movable = counts[new] > 1
            far = int(np.argmax(np.where(movable, dist_own, -1.0)))
            counts[new[far]] -= 1
            new[far] = c
            counts[c] = 1
            centers[c] = X[far]
            D = _sq_dists(X, centers)
        trace.append(float(D[np.arange(n), new].sum()))
        if np.array_equal(new, labels):
            break
        labels = new
    return KMeansResult(labels, centers, trace, it)


def kmeans(Z, k, seed, max_iter=300) -> np.ndarray:
    return kmeans_detail(Z, k, seed, max_iter).labels


def _check_clusters(assignment):
    a = np.asarray(assignment)
    uniq = np.unique(a)
    if uniq.size < 2:
        raise MetricError("clustering metric needs at least two clusters")
    return a, uniq


def silhouette(Z, assignment):
    """Mean silhouette over all points (singletons score 0), x100."""
    X = np.asarray(Z, dtype=np.float64)
    a, uniq = _check_clusters(assignment)
    lab = np.searchsorted(uniq, a)
    k = uniq.size
    sizes = np.bincount(lab, minlength=k).astype(np.float64)
    onehot = np.zeros((X.shape[0], k))
    onehot[np.arange(X.shape[0]), lab] = 1.0
    n = X.shape[0]
    sq = np.einsum("ij,ij->i", X, X)
    block = max(1, min(n, 4_000_000 // max(n, 1)))
    s = np.zeros(n)
    for i0 in range(0, n, block):
        rows = np.arange(i0, min(n, i0 + block))
        D = np.sqrt(np.maximum(sq[rows, None] + sq[None, :] - 2.0 * X[rows] @ X.T, 0.0))
        D[np.arange(rows.size), rows] = 0.0
        sums = D @ onehot
        own = lab[rows]
        own_size = sizes[own]
        a_i = np.where(own_size > 1, sums[np.arange(rows.size), own] / np.maximum(own_size - 1, 1), 0.0)
        other = sums / sizes[None, :]
        other[np.arange(rows.size), own] = np.inf
        b_i = other.min(axis=1)
        denom = np.maximum(a_i, b_i)
        val = np.where(denom > 0, (b_i - a_i) / np.where(denom > 0, denom, 1.0), 0.0)
        s[rows] = np.where(own_size > 1, val, 0.0)
    return 100.0 * float(s.mean())


def calinski_harabasz(Z, assignment):
    """(tr B / tr W) * (n - k) / (k - 1); +inf when within-cluster dispersion is zero."""
    X = np.asarray(Z, dtype=np.float64)
    a, uniq = _check_clusters(assignment)
    n, k = X.shape[0], uniq.size
    if k >= n:
        raise MetricError("Calinski-Harabasz needs k < n")
    mu = X.mean(axis=0)
    tr_b = tr_w = 0.0
    for c in uniq:
        Xc = X[a == c]
        mc = Xc.mean(axis=0)
        tr_b += Xc.shape[0] * float(np.sum((mc - mu) ** 2))
        tr_w += float(np.sum((Xc - mc) ** 2))
    if tr_w == 0.0:
        return math.inf
    return (tr_b / tr_w) * (n - k) / (k - 1)


def graph_knn(g: Graph, k: int):
    """For each node, up to k nearest nodes by hop distance, ties by id."""
    out = []
    for s in range(g.n):
        seen = {s}
        frontier = [s]
        picked = []
        while frontier and len(picked) < k:
            layer = set()
            for u in frontier:
                for v in g.neighbors(u):
                    v = int(v)
                    if v not in seen:
                        seen.add(v)
                        layer.add(v)
            layer = sorted(layer)
            picked.extend(layer[: k - len(picked)])
            frontier = layer
        out.append(picked)
    return out


def embedding_knn(Z, k: int):
    X = np.asarray(Z, dtype=np.float64)
    n = X.shape[0]
    sq = np.einsum("ij,ij->i", X, X)
    block = max(1, min(n, 2_000_000 // max(n, 1)))
    out = np.empty((n, min(k, n - 1)), dtype=np.int64)
    for i0 in range(0, n, block):
        rows = np.arange(i0, min(n, i0 + block))
        D = np.maximum(sq[rows, None] + sq[None, :] - 2.0 * X[rows] @ X.T, 0.0)
        D[np.arange(rows.size), rows] = np.inf
        out[rows] = np.argsort(D, axis=1, kind="stable")[:, : out.shape[1]]
    return out


def knn_consistency(Z, g: Graph, k=10):
    if k < 1:
        raise MetricError("k must be >= 1")
    gk = cached(g, ("graph_knn", k), lambda: graph_knn(g, k))
    ek = embedding_knn(Z, k)
    total = 0.0
    for i in range(g.n):
        total += len(set(gk[i]) & set(ek[i].tolist())) / k
    return 100.0 * total / g.n


def coherence_detail(g: Graph, assignment):
    """Fraction of clipped PMI mass (pairs i < j) that falls inside clusters, x100; (value, degenerate)."""
    pmi = cached(g, "pmi", lambda: pmi_matrix(g, True)).tocoo()
    keep = pmi.row < pmi.col
    r, c, v = pmi.row[keep], pmi.col[keep], pmi.data[keep]
    total = float(v.sum())
    if total <= 0:
        return 0.0, True
    a = np.asarray(assignment)
    return 100.0 * float(v[a[r] == a[c]].sum()) / total, False


def coherence(Z, g: Graph, assignment):
    return coherence_detail(g, assignment)[0]


def self_cluster(Z, assignment):
    """Surrogate clusterability score in [-0.80, -0.70]; lower means tighter, better separated clusters.

    d_i = cos(z_i, own centroid) - max cos(z_i, other centroid), scaled by the
    spread of d, then mapped through -(0.75 + 0.05 tanh(.)).
    """
    X = np.asarray(Z, dtype=np.float64)
    a, uniq = _check_clusters(assignment)
    lab = np.searchsorted(uniq, a)
    C = np.stack([X[lab == j].mean(axis=0) for j in range(uniq.size)])
    Xn = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), ad.COS_EPS)
    Cn = C / np.maximum(np.linalg.norm(C, axis=1, keepdims=True), ad.COS_EPS)
    cos = Xn @ Cn.T
    rows = np.arange(X.shape[0])
    intra = cos[rows, lab]
    cos[rows, lab] = -np.inf
    d = intra - cos.max(axis=1)
    scale = float(np.std(d)) + 1e-12
    return float(np.mean(-(0.75 + 0.05 * np.tanh(d / scale))))


def rankme(Z):
    """exp of the entropy of the normalised singular-value spectrum (via the Gram matrix)."""
    X = np.asarray(Z, dtype=np.float64)
    if not np.any(X):
        raise MetricError("rankme of an all-zero embedding is undefined")
    lam = np.linalg.eigvalsh(X.T @ X)
    tol = lam.max() * max(X.shape) * np.finfo(np.float64).eps * 10
    sig = np.sqrt(lam[lam > tol])
    p = np.maximum(sig / sig.sum(), 1e-12)
    return float(np.exp(-np.sum(p * np.log(p))))


# the full suite

@dataclass
class MetricVector:
    values: dict
    stds: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def as_list(self):
        return [self.values[m] for m in METRIC_IDS]

    def flag_string(self):
        return ";".join(f"{k}:{v}" for k, v in sorted(self.flags.items()))


def cluster_count(g: Graph, config: ProbeConfig):
    if config.cluster_k is not None:
        return config.cluster_k
    return g.num_classes if g.has_labels else config.default_cluster_k


def evaluate_all(Z, g: Graph, config: ProbeConfig = ProbeConfig(), seed=0) -> MetricVector:
    Z = np.asarray(Z, dtype=np.float64)
    vals = {m: math.nan for m in METRIC_IDS}
    stds, flags = {}, {}

    def attempt(names, fn):
        try:
            fn()
        except (MetricError, ValueError, FloatingPointError) as exc:
            for nm in names:
                vals[nm] = math.nan
                flags[nm] = f"error({exc})".replace(",", " ").replace(";", " ")

    def cls():
        if not g.has_labels:
            for nm in CLS_METRICS:
                flags[nm] = "absent"
            return
        labeled = np.flatnonzero(g.labels >= 0)
        res = node_cls_probe(Z[labeled], g.labels[labeled], None, config.repeats, mix(seed, 1), config)
        for key, nm in zip(("accuracy", "precision", "recall", "f1"), CLS_METRICS):
            vals[nm], stds[nm] = res[key]

    def lp():
        split = edge_split(g, config.holdout, mix(seed, 2))
        vals.update(link_pred_eval(Z, split, config.lp_threshold))

    def corr(kind, nm):
        def run():
            v, degenerate = adjacency_correlation(Z, g, kind)
            vals[nm] = v
            if degenerate:
                flags[nm] = "degenerate"
        return run

    def recon():
        vals["graph_reconstruction_bce_loss"] = reconstruction_bce(Z, g, seed=mix(seed, 3))

    attempt(CLS_METRICS, cls)
    attempt(LP_METRICS, lp)
    attempt(["cosine_adj_corr"], corr("cosine", "cosine_adj_corr"))
    attempt(["dot_adj_corr"], corr("dot", "dot_adj_corr"))
    attempt(["euclidean_adj_corr"], corr("euclidean", "euclidean_adj_corr"))
    attempt(["graph_reconstruction_bce_loss"], recon)

    assignment = None

    def clusters():
        nonlocal assignment
        k = min(cluster_count(g, config), g.n)
        assignment = kmeans(Z, k, mix(seed, 4), config.kmeans_max_iter)

    attempt(["silhouette", "calinski_harabasz", "coherence", "selfCluster"], clusters)
    if assignment is not None:
        attempt(["silhouette"], lambda: vals.__setitem__("silhouette", silhouette(Z, assignment)))

        def ch():
            v = calinski_harabasz(Z, assignment)
            vals["calinski_harabasz"] = v
            if math.isinf(v):
                flags["calinski_harabasz"] = "infinite"
        attempt(["calinski_harabasz"], ch)

        def coh():
            v, degenerate = coherence_detail(g, assignment)
            vals["coherence"] = v
            if degenerate:
                flags["coherence"] = "degenerate"
        attempt(["coherence"], coh)
        attempt(["selfCluster"], lambda: vals.__setitem__("selfCluster", self_cluster(Z, assignment)))
    attempt(["knn_consistency"], lambda: vals.__setitem__("knn_consistency", knn_consistency(Z, g, config.knn_k)))
    attempt(["rankme"], lambda: vals.__setitem__("rankme", rankme(Z)))
    return MetricVector({k: float(v) for k, v in vals.items()}, stds, flags)


CSV_HEADER = ["model", "loss", "dataset", "setting", "seed", *METRIC_IDS, "flags"]


def format_value(v):
    return repr(float(v))


def metric_row(model, loss, dataset, setting, seed, mv: MetricVector):
    return [model, loss, dataset, setting, str(seed), *[format_value(mv.values[m]) for m in METRIC_IDS],
            mv.flag_string()]
