import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import lossbench.autodiff as ad
from lossbench.autodiff import Tape, backward, grad_check
from lossbench.graph import Graph, pagerank, pmi_matrix
from lossbench.losses import (BASE_LOSSES, HybridLossSpec, LossContext, canonical_loss, contrastive_loss,
                              dae_loss, dae_noise, edge_triples, enumerate_hybrids, hybrid_loss, init_loss_params,
                              pagerank_anchors, pagerank_loss, pagerank_partners, pmi_loss, total_loss,
                              triplet_loss)

from conftest import ring_graph

CTX = LossContext()


def cos(a, b):
    return float(a @ b / (max(np.linalg.norm(a), 1e-12) * max(np.linalg.norm(b), 1e-12)))


def hinge_oracle(Z, triples, M):
    return sum(max(0.0, M - cos(Z[a], Z[p]) + cos(Z[a], Z[n])) for a, p, n in triples) / len(triples)


# PMI

def test_pmi_loss_examples():
    Z = np.random.default_rng(0).normal(size=(4, 3))
    assert pmi_loss(Z, np.zeros((4, 4))) == 0.0
    P = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert pmi_loss(np.array([[1.0, 2.0], [1.0, 2.0]]), P) == pytest.approx(-0.5, abs=1e-15)


def test_pmi_loss_double_loop_oracle():
    rng = np.random.default_rng(1)
    Z = rng.normal(size=(6, 3))
    P = np.abs(rng.normal(size=(6, 6)))
    P[rng.random((6, 6)) < 0.4] = 0
    oracle = -sum(P[i, j] * cos(Z[i], Z[j]) for i in range(6) for j in range(6)) / 36
    assert abs(pmi_loss(Z, P) - oracle) < 1e-12
    g = ring_graph(6, seed=2)
    S = pmi_matrix(g)
    dense = S.toarray()
    oracle = -sum(dense[i, j] * cos(Z[i], Z[j]) for i in range(6) for j in range(6)) / 36
    assert abs(pmi_loss(Z, S) - oracle) < 1e-12


# contrastive / triplet

@pytest.mark.parametrize("loss", [contrastive_loss, triplet_loss])
def test_hinge_closed_and_cancelled(loss):
    # two cliques, no cross edges: positives identical, negatives orthogonal
    edges = [(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)]
    g = Graph.from_edges(6, edges)
    Z = np.array([[1.0, 0]] * 3 + [[0, 1.0]] * 3)
    assert loss(Z, g, CTX, seed=3) == 0.0
    assert loss(np.ones((6, 2)), g, CTX, seed=3) == pytest.approx(CTX.margin, abs=1e-15)


@pytest.mark.parametrize("loss,stream", [(contrastive_loss, 11), (triplet_loss, 19)])
def test_hinge_matches_triple_oracle(loss, stream):
    g = ring_graph(8, seed=4)
    Z = np.random.default_rng(5).normal(size=(8, 3))
    a, p, n = edge_triples(g, CTX, 7, stream)
    assert len(a) == 2 * g.num_edges
    A = g.adj.toarray()
    assert all(A[x, y] == 1 and A[x, z] == 0 and x != z for x, y, z in zip(a, p, n))
    oracle = hinge_oracle(Z, list(zip(a, p, n)), CTX.margin)
    assert abs(loss(Z, g, CTX, 7) - oracle) < 1e-12


def test_contrastive_and_triplet_use_separate_streams():
    g = ring_graph(30, extra=20, seed=1)
    assert not np.array_equal(edge_triples(g, CTX, 3, 11)[2], edge_triples(g, CTX, 3, 19)[2])
    Z = np.random.default_rng(0).normal(size=(30, 4))
    assert contrastive_loss(Z, g, CTX, 3) != triplet_loss(Z, g, CTX, 3)
    assert contrastive_loss(Z, g, CTX, 3) == contrastive_loss(Z, g, CTX, 3)


def test_contrastive_rejects_complete_graph():
    g = Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])
    with pytest.raises(ValueError):
        contrastive_loss(np.ones((3, 2)), g, CTX, 0)


def test_multiple_negatives():
    g = ring_graph(10, seed=3)
    ctx = LossContext(negatives=3)
    a, p, n = edge_triples(g, ctx, 0, 11)
    assert len(a) == 6 * g.num_edges


# DAE

def test_dae_examples():
    E = np.random.default_rng(0).normal(size=(5, 3))
    # with sigma 0 a ReLU MLP reproduces E by splitting into positive and negative parts
    W1 = np.hstack([np.eye(3), -np.eye(3)])
    W2 = np.vstack([np.eye(3), -np.eye(3)])
    den = (W1, np.zeros((1, 6)), W2, np.zeros((1, 3)))
    assert dae_loss(E, den, 0.0, seed=1) < 1e-30
    zero = (np.zeros((3, 3)), np.zeros((1, 3)), np.zeros((3, 3)), np.zeros((1, 3)))
    assert dae_loss(E, zero, 0.1, seed=1) == pytest.approx(np.mean(E ** 2), rel=1e-14)


def test_dae_elementwise_oracle():
    rng = np.random.default_rng(2)
    E = rng.normal(size=(4, 3))
    W1, b1, W2, b2 = rng.normal(size=(3, 3)), rng.normal(size=(1, 3)), rng.normal(size=(3, 3)), rng.normal(size=(1, 3))
    noise = rng.normal(0, 0.1, size=(4, 3))
    rec = np.maximum((E + noise) @ W1 + b1, 0) @ W2 + b2
    oracle = sum((E[i, j] - rec[i, j]) ** 2 for i in range(4) for j in range(3)) / 12
    assert abs(dae_loss(E, (W1, b1, W2, b2), 0.1, 0, noise=noise) - oracle) < 1e-12


def test_dae_noise_is_seeded():
    a, b, c = dae_noise((4, 3), 0.1, 5), dae_noise((4, 3), 0.1, 5), dae_noise((4, 3), 0.1, 6)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not dae_noise((4, 3), 0.0, 5).any()


# PageRank loss

def test_pagerank_partners_exhaustive_oracle():
    rng = np.random.default_rng(3)
    pr = np.round(rng.random(6), 1)  # rounding forces ties
    pos, neg = pagerank_partners(pr, np.arange(6))
    for u in range(6):
        cand = [w for w in range(6) if w != u]
        best = min(cand, key=lambda w: (abs(pr[u] - pr[w]), w))
        assert pos[u] == best
        rest = [w for w in cand if w != best]
        worst = max(rest, key=lambda w: (abs(pr[u] - pr[w]), -w))
        assert neg[u] == worst


def test_pagerank_loss_examples():
    g = ring_graph(6, seed=1)
    pr = pagerank(g)
    assert pagerank_loss(np.ones((6, 2)), pr, CTX, 0) == pytest.approx(CTX.margin, abs=1e-15)
    # two PageRank levels: P_u shares u's level, N_u does not
    pr2 = np.array([0.1, 0.1, 0.1, 0.3, 0.3, 0.3])
    Z = np.array([[1.0, 0]] * 3 + [[0, 1.0]] * 3)
    assert pagerank_loss(Z, pr2, CTX, 0) == 0.0
    with pytest.raises(ValueError):
        pagerank_loss(np.ones((2, 2)), np.array([0.5, 0.5]), CTX, 0)


def test_pagerank_loss_matches_oracle_with_anchor_subset():
    g = ring_graph(12, seed=6)
    pr = pagerank(g)
    ctx = LossContext(anchor_count=5)
    Z = np.random.default_rng(2).normal(size=(12, 3))
    anchors = pagerank_anchors(12, ctx, 4)
    assert len(anchors) == 5 and len(set(anchors)) == 5
    pos, neg = pagerank_partners(pr, anchors)
    oracle = hinge_oracle(Z, list(zip(anchors, pos, neg)), ctx.margin)
    assert abs(pagerank_loss(Z, pr, ctx, 4) - oracle) < 1e-12
    np.testing.assert_array_equal(pagerank_anchors(12, CTX, 4), np.arange(12))


@settings(max_examples=25)
@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_cosine_losses_scale_invariant(c, seed):
    g = ring_graph(8, seed=seed % 7)
    Z = np.random.default_rng(seed).normal(size=(8, 3))
    pr = pagerank(g)
    S = pmi_matrix(g)
    for f in (lambda X: pmi_loss(X, S), lambda X: contrastive_loss(X, g, CTX, seed),
              lambda X: triplet_loss(X, g, CTX, seed), lambda X: pagerank_loss(X, pr, CTX, seed)):
        assert abs(f(Z) - f(c * Z)) < 1e-10


@settings(max_examples=25)
@given(st.integers(0, 10_000))
def test_hinge_losses_bounded(seed):
    g = ring_graph(9, seed=seed % 5)
    Z = np.random.default_rng(seed).normal(size=(9, 2))
    for v in (contrastive_loss(Z, g, CTX, seed), triplet_loss(Z, g, CTX, seed),
              pagerank_loss(Z, pagerank(g), CTX, seed)):
        assert 0.0 <= v <= CTX.margin + 2


def test_loss_context_validation():
    for kw in ({"margin": 0}, {"dae_sigma": -1}, {"negatives": 0}, {"anchor_count": 0}):
        with pytest.raises(ValueError):
            LossContext(**kw)


# hybrids

def test_hybrid_examples():
    one = HybridLossSpec(("PMI_L",))
    assert hybrid_loss(one, {"PMI_L": 3.0}, {"PMI_L": 0.0}) == 1.5
    three = HybridLossSpec(("Contr_l", "PMI_L", "PR_L"))
    vals = dict(zip(three.members, (1.0, 2.0, 3.0)))
    assert hybrid_loss(three, vals, dict.fromkeys(three.members, 0.0)) == 3.0
    sat = hybrid_loss(three, vals, dict.fromkeys(three.members, 30.0))
    assert abs(sat - 6.0) < 1e-9
    with pytest.raises(ValueError):
        hybrid_loss(three, {"Contr_l": 1.0}, dict.fromkeys(three.members, 0.0))


def test_hybrid_half_sum_on_injected_values():
    rng = np.random.default_rng(0)
    for spec in enumerate_hybrids(5):
        vals = {m: float(rng.normal() * 10) for m in spec.members}
        got = hybrid_loss(spec, vals, dict.fromkeys(spec.members, 0.0))
        assert abs(got - 0.5 * sum(vals.values())) < 1e-12


def test_hybrid_gradients_flow_to_gates_and_members():
    spec = HybridLossSpec(("CrossE_L", "PR_L"))
    t = Tape()
    L1, L2 = t.param("L1", np.array(2.0)), t.param("L2", np.array(-1.0))
    th1, th2 = t.param("t1", np.array([[0.3]])), t.param("t2", np.array([[-0.4]]))
    out = hybrid_loss(spec, {"CrossE_L": L1, "PR_L": L2}, {"CrossE_L": th1, "PR_L": th2})
    g = backward(t, out)
    s = lambda x: 1 / (1 + math.exp(-x))
    assert g["L1"] == pytest.approx(s(0.3)) and g["L2"] == pytest.approx(s(-0.4))
    assert g["t1"][0, 0] == pytest.approx(2.0 * s(0.3) * (1 - s(0.3)))


@given(st.lists(st.floats(-100, 100), min_size=5, max_size=5), st.lists(st.floats(-5, 5), min_size=5, max_size=5),
       st.integers(0, 4), st.floats(0, 50))
def test_hybrid_monotone(values, thetas, which, bump):
    spec = HybridLossSpec(BASE_LOSSES)
    vals = dict(zip(BASE_LOSSES, values))
    gates = dict(zip(BASE_LOSSES, thetas))
    before = hybrid_loss(spec, vals, gates)
    vals[BASE_LOSSES[which]] += bump
    assert hybrid_loss(spec, vals, gates) >= before


def test_enumerate_hybrids():
    assert len(enumerate_hybrids(1)) == 5
    assert len(enumerate_hybrids(2)) == 15
    specs = enumerate_hybrids(5)
    assert len(specs) == 31
    names = [s.name for s in specs]
    assert names == sorted(names) and len(set(names)) == 31
    assert {frozenset(s.members) for s in specs} == {frozenset(c) for r in range(1, 6)
                                                      for c in combinations(BASE_LOSSES, r)}
    with pytest.raises(ValueError):
        enumerate_hybrids(0)
    with pytest.raises(ValueError):
        enumerate_hybrids(6)


def test_canonical_names():
    assert HybridLossSpec.parse("pr_l + Contr_l+PMI_L").name == "Contr_l + PMI_L + PR_L"
    assert canonical_loss("contr_1") == "Contr_l"
    with pytest.raises(ValueError):
        HybridLossSpec.parse("InfoNCE")
    with pytest.raises(ValueError):
        HybridLossSpec(())


# gradients through the full objective

SMALL_CTX = LossContext(anchor_count=5)


@pytest.mark.parametrize("name", BASE_LOSSES)
def test_loss_gradients_wrt_embeddings_and_aux(name):
    g = ring_graph(8, seed=1)
    spec = HybridLossSpec((name,))
    rng = np.random.default_rng(2)
    aux = init_loss_params(spec, 3, seed=4)
    aux = {k: v + rng.normal(0, 0.5, v.shape) for k, v in aux.items()}
    names = sorted(aux)
    Z0 = rng.normal(size=(8, 3))

    def f(t, Z, *vs):
        pv = dict(zip(names, vs))
        return total_loss(spec, Z, pv, g, SMALL_CTX, 9)[0]

    assert grad_check(f, [Z0] + [aux[n] for n in names]) < 1e-4


def test_losses_deterministic_per_seed():
    g = ring_graph(10, seed=3)
    spec = HybridLossSpec(BASE_LOSSES)
    aux = init_loss_params(spec, 4, seed=1)
    Z = np.random.default_rng(0).normal(size=(10, 4))

    def value(seed):
        t = Tape()
        pv = {k: t.param(k, v) for k, v in aux.items()}
        return total_loss(spec, t.const(Z), pv, g, CTX, seed)[0].value

    assert value(5) == value(5)
    assert value(5) != value(6)
