"""The five base unsupervised losses and the sigmoid-gated hybrid composer."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .graph import Graph, cached, pagerank, pmi_matrix, sample_negatives
from .encoders import glorot
from .seeding import mix

BASE_LOSSES = ("Contr_l", "CrossE_L", "PMI_L", "PR_L", "Triplet_L")
_ALIASES = {"contr_l": "Contr_l", "contr_1": "Contr_l", "crosse_l": "CrossE_L", "pmi_l": "PMI_L",
            "pr_l": "PR_L", "triplet_l": "Triplet_L"}
# independent seed streams per stochastic loss
_STREAM = {"Contr_l": 11, "CrossE_L": 13, "PR_L": 17, "Triplet_L": 19}


def canonical_loss(name: str) -> str:
    key = name.strip().lower()
    if key not in _ALIASES:
        raise ValueError(f"unknown base loss {name!r}; expected one of {BASE_LOSSES}")
    return _ALIASES[key]


@dataclass(frozen=True)
class HybridLossSpec:
    members: tuple

    def __post_init__(self):
        members = tuple(sorted({canonical_loss(m) for m in self.members}, key=BASE_LOSSES.index))
        if not members:
            raise ValueError("a loss spec needs at least one member")
        object.__setattr__(self, "members", members)

    @classmethod
    def parse(cls, name: str) -> "HybridLossSpec":
        return cls(tuple(part for part in name.split("+") if part.strip()))

    @property
    def name(self):
        return " + ".join(self.members)

    @property
    def order(self):
        return len(self.members)

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class LossContext:
    margin: float = 0.5
    dae_sigma: float = 0.1
    negatives: int = 1
    anchor_count: int = 512

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.dae_sigma < 0:
            raise ValueError("dae_sigma must be >= 0")
        if self.negatives < 1 or self.anchor_count < 1:
            raise ValueError("negatives and anchor_count must be >= 1")


def enumerate_hybrids(max_order: int = 5) -> list:
    if not 1 <= max_order <= len(BASE_LOSSES):
        raise ValueError("max_order must lie in 1..5")
    specs = [HybridLossSpec(c) for r in range(1, max_order + 1) for c in combinations(BASE_LOSSES, r)]
    return sorted(specs, key=lambda s: s.name)


def _wrap(Z):
    if isinstance(Z, Var):
        return Z, False
    tape = Tape()
    return tape.const(np.asarray(Z, dtype=np.float64)), True


def _out(v: Var, plain: bool):
    return float(v.value) if plain else v


def pmi_loss(Z, pmi):
    """-(1/n^2) sum_ij PMI_ij cos(z_i, z_j) over the PMI support."""
    Z, plain = _wrap(Z)
    n = Z.shape[0]
    coo = pmi.tocoo() if hasattr(pmi, "tocoo") else None
    if coo is None:
        dense = np.asarray(pmi, dtype=np.float64)
        r, c = np.nonzero(dense)
        vals = dense[r, c]
    else:
        keep = coo.data != 0
        r, c, vals = coo.row[keep], coo.col[keep], coo.data[keep]
    if vals.size == 0:
        return _out(Z.tape.const(0.0), plain)
    cos = ad.cosine_rows(Z[r], Z[c])
    total = ad.tsum(cos * Z.tape.const(vals))
    return _out(total * (-1.0 / (n * n)), plain)


def hinge_triples(Z: Var, anchors, pos, neg, margin):
    """mean of max(0, M - cos(z_a, z_p) + cos(z_a, z_n))."""
    za = Z[anchors]
    gap = ad.cosine_rows(za, Z[neg]) - ad.cosine_rows(za, Z[pos])
    return ad.mean(ad.hinge(gap + margin))


def edge_triples(g: Graph, ctx: LossContext, seed, stream):
    """Both directions of every edge, each paired with ctx.negatives sampled non-neighbours."""
    if g.num_edges == 0:
        raise ValueError("edge-based losses need at least one edge")
    u = np.concatenate([g.edges[:, 0], g.edges[:, 1]])
    v = np.concatenate([g.edges[:, 1], g.edges[:, 0]])
    keys = cached(g, "edge_keys", g.edge_keys)
    neg = sample_negatives(g, u, ctx.negatives, mix(seed, stream), keys=keys)
    k = ctx.negatives
    return np.repeat(u, k), np.repeat(v, k), neg.reshape(-1)


def contrastive_loss(Z, g: Graph, ctx: LossContext, seed):
    Z, plain = _wrap(Z)
    a, p, n = edge_triples(g, ctx, seed, _STREAM["Contr_l"])
    return _out(hinge_triples(Z, a, p, n, ctx.margin), plain)


def triplet_loss(Z, g: Graph, ctx: LossContext, seed):
    Z, plain = _wrap(Z)
    a, p, n = edge_triples(g, ctx, seed, _STREAM["Triplet_L"])
    return _out(hinge_triples(Z, a, p, n, ctx.margin), plain)


def dae_noise(shape, sigma, seed):
    rng = np.random.default_rng(mix(seed, _STREAM["CrossE_L"]))
    return rng.normal(0.0, 1.0, size=shape) * sigma


def dae_loss(E, denoiser, sigma, seed, noise=None):
    """Mean squared error between E and a 2-layer MLP applied to E plus Gaussian noise.

    `denoiser` is (W1, b1, W2, b2) as Vars or arrays.
    """
    E, plain = _wrap(E)
    tape = E.tape
    W1, b1, W2, b2 = (w if isinstance(w, Var) else tape.const(w) for w in denoiser)
    if noise is None:
        noise = dae_noise(E.shape, sigma, seed)
    noisy = E + tape.const(noise)
    rec = ad.relu(noisy @ W1 + b1) @ W2 + b2
    n, d = E.shape
    return _out(ad.squared_frobenius(E - rec) * (1.0 / (n * d)), plain)


def pagerank_partners(pr, anchors):
    """Most and least PageRank-similar node for each anchor; ties go to the lowest id."""
    pr = np.asarray(pr, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.int64)
    dist = np.abs(pr[anchors][:, None] - pr[None, :])
    rows = np.arange(anchors.size)
    near = dist.copy()
    near[rows, anchors] = np.inf
    pos = np.argmin(near, axis=1)
    far = dist.copy()
    far[rows, anchors] = -np.inf
    far[rows, pos] = -np.inf
    neg = np.argmax(far, axis=1)
    return pos, neg


def pagerank_anchors(n, ctx: LossContext, seed):
    rng = np.random.default_rng(mix(seed, _STREAM["PR_L"]))
    size = min(ctx.anchor_count, n)
    if size == n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=size, replace=False))


def pagerank_loss(Z, pr, ctx: LossContext, seed):
    Z, plain = _wrap(Z)
    n = Z.shape[0]
    if n < 3:
        raise ValueError("PR loss needs at least 3 nodes")
    anchors = pagerank_anchors(n, ctx, seed)
    pos, neg = pagerank_partners(pr, anchors)
    return _out(hinge_triples(Z, anchors, pos, neg, ctx.margin), plain)


def hybrid_loss(spec: HybridLossSpec, base_values: dict, gates: dict):
    """sum over members of sigmoid(theta_i) * L_i."""
    missing = [m for m in spec.members if m not in base_values]
    if missing:
        raise ValueError(f"missing base loss values for {missing}")
    extra = set(base_values) - set(spec.members)
    if extra:
        raise ValueError(f"base values given for non-members {sorted(extra)}")
    terms = []
    for m in spec.members:
        L, theta = base_values[m], gates[m]
        if isinstance(L, Var) or isinstance(theta, Var):
            tape = L.tape if isinstance(L, Var) else theta.tape
            L = L if isinstance(L, Var) else tape.const(L)
            theta = theta if isinstance(theta, Var) else tape.const(theta)
            terms.append(ad.sigmoid(theta) * L)
        else:
            terms.append(float(1.0 / (1.0 + np.exp(-float(np.asarray(theta).reshape(-1)[0])))) * float(L))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    if isinstance(total, Var):
        return ad.tsum(total)
    return total


def init_loss_params(spec: HybridLossSpec, embed_dim: int, seed: int) -> dict:
    out = {f"gate.{m}": np.zeros((1, 1)) for m in spec.members}
    if "CrossE_L" in spec.members:
        D = embed_dim
        out["dae.W1"] = glorot((D, D), seed, "dae.W1")
        out["dae.b1"] = np.zeros((1, D))
        out["dae.W2"] = glorot((D, D), seed, "dae.W2")
        out["dae.b2"] = np.zeros((1, D))
    return out


def structure(g: Graph):
    """Cached PMI matrix and PageRank vector for a graph."""
    pmi = cached(g, "pmi", lambda: pmi_matrix(g, True))
    pr = cached(g, "pagerank", lambda: pagerank(g))
    return pmi, pr


def base_loss(name, Z: Var, pv: dict, g: Graph, ctx: LossContext, seed):
    if name == "PMI_L":
        return pmi_loss(Z, structure(g)[0])
    if name == "Contr_l":
        return contrastive_loss(Z, g, ctx, seed)
    if name == "Triplet_L":
        return triplet_loss(Z, g, ctx, seed)
    if name == "CrossE_L":
        den = (pv["dae.W1"], pv["dae.b1"], pv["dae.W2"], pv["dae.b2"])
        return dae_loss(Z, den, ctx.dae_sigma, seed)
    if name == "PR_L":
        return pagerank_loss(Z, structure(g)[1], ctx, seed)
    raise ValueError(f"unknown base loss {name!r}")


def total_loss(spec: HybridLossSpec, Z: Var, pv: dict, g: Graph, ctx: LossContext, seed):
    """Returns (scalar Var, {member: Var})."""
    values = {m: base_loss(m, Z, pv, g, ctx, seed) for m in spec.members}
    gates = {m: pv[f"gate.{m}"] for m in spec.members}
    return hybrid_loss(spec, values, gates), values
