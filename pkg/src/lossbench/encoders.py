"""Universal feature encoder, the seven GNN encoders and parameter checkpoints."""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tape, Var
from .seeding import mix
from .graph import Graph, cached, laplacian_positional_encodings, normalized_adjacency

ARCHITECTURES = ("GCN", "GAT", "SAGE", "GIN", "PAGNN", "MPNN")
ALL_ARCHITECTURES = ARCHITECTURES + ("ALL",)
CKPT_VERSION = "lossbench-ckpt-v1"
LEAKY_SLOPE = 0.2


class SpecMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    architecture: str = "GCN"
    layers: int = 2
    hidden_dim: int = 128
    embed_dim: int = 128
    d_h: int = 256
    d_out: int | None = None
    attention_heads: int = 4
    eps_learnable: bool = True
    pe_dim: int = 8
    sample_size: int = 10
    fusion: str = "sum"
    strict_protocol: bool = False

    def __post_init__(self):
        if self.architecture not in ALL_ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.layers < 1 or self.attention_heads < 1:
            raise ValueError("layers and attention_heads must be >= 1")
        if self.fusion not in ("sum", "concat"):
            raise ValueError(f"fusion must be 'sum' or 'concat', got {self.fusion!r}")
        if self.strict_protocol and self.embed_dim != 128:
            raise ValueError("the benchmark protocol fixes embed_dim at 128")
        if self.universal_width > self.d_h:
            raise ValueError(f"universal d_out {self.universal_width} exceeds d_h {self.d_h}")

    @property
    def universal_width(self):
        return self.d_out if self.d_out is not None else self.hidden_dim

    def for_arch(self, arch):
        return replace(self, architecture=arch)

    def layer_dims(self):
        dims = [self.universal_width] + [self.hidden_dim] * (self.layers - 1) + [self.embed_dim]
        return list(zip(dims[:-1], dims[1:]))

    def heads_at(self, layer):
        return 1 if layer == self.layers - 1 else self.attention_heads


@dataclass
class ParameterSet:
    tensors: dict = field(default_factory=dict)
    init_seed: int = 0

    def copy(self):
        return ParameterSet({k: v.copy() for k, v in self.tensors.items()}, self.init_seed)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def names(self):
        return sorted(self.tensors)


def glorot(shape, seed, name):
    rng = np.random.default_rng(mix(seed, zlib.crc32(name.encode())))
    fan_in, fan_out = shape[0], shape[1] if len(shape) > 1 else 1
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _arch_shapes(spec: EncoderSpec, arch: str, prefix: str) -> dict:
    shapes = {}
    for l, (din, dout) in enumerate(spec.layer_dims()):
        p = f"{prefix}.l{l}"
        if arch == "GCN":
            shapes[f"{p}.W"] = (din, dout)
        elif arch in ("GAT", "PAGNN"):
            heads = spec.heads_at(l)
            if dout % heads:
                raise ValueError(f"layer width {dout} not divisible by {heads} heads")
            ph = dout // heads
            extra = spec.pe_dim if arch == "PAGNN" else 0
            for h in range(heads):
                shapes[f"{p}.W{h}"] = (din, ph)
                shapes[f"{p}.a{h}"] = (2 * ph + extra, 1)
        elif arch == "SAGE":
            shapes[f"{p}.W"] = (2 * din, dout)
        elif arch == "GIN":
            shapes[f"{p}.W1"] = (din, spec.hidden_dim)
            shapes[f"{p}.b1"] = (1, spec.hidden_dim)
            shapes[f"{p}.W2"] = (spec.hidden_dim, dout)
            shapes[f"{p}.b2"] = (1, dout)
            shapes[f"{p}.eps"] = (1, 1)
        elif arch == "MPNN":
            shapes[f"{p}.Wm"] = (2 * din, dout)
            shapes[f"{p}.bm"] = (1, dout)
            shapes[f"{p}.Wu"] = (din + dout, dout)
            shapes[f"{p}.bu"] = (1, dout)
    return shapes


def parameter_shapes(spec: EncoderSpec, d_in: int) -> dict:
    shapes = {"universal.W_p": (d_in, spec.d_h), "universal.b_p": (1, spec.d_h)}
    if spec.architecture == "ALL":
        for arch in ARCHITECTURES:
            shapes.update(_arch_shapes(spec, arch, arch))
        if spec.fusion == "concat":
            shapes["ALL.proj"] = (len(ARCHITECTURES) * spec.embed_dim, spec.embed_dim)
    else:
        shapes.update(_arch_shapes(spec, spec.architecture, spec.architecture))
    return shapes


def _init_tensor(name, shape, seed):
    leaf = name.rsplit(".", 1)[-1]
    if leaf.startswith("b") or leaf == "eps":
        return np.zeros(shape)
    return glorot(shape, seed, name)


def init_params(spec: EncoderSpec, d_in: int, seed: int) -> ParameterSet:
    shapes = parameter_shapes(spec, d_in)
    return ParameterSet({k: _init_tensor(k, s, seed) for k, s in shapes.items()}, seed)


def adapt_params(spec: EncoderSpec, params: ParameterSet, d_in: int) -> ParameterSet:
    """Re-instantiate the input projection for a new feature width; everything else carries over."""
    out = params.copy()
    shape = (d_in, spec.d_h)
    if out.tensors["universal.W_p"].shape != shape:
        out.tensors["universal.W_p"] = glorot(shape, params.init_seed, "universal.W_p")
    return out


# graph structure shared by the layers

@dataclass
class EdgeIndex:
    dst: np.ndarray
    src: np.ndarray
    gather: sp.csr_matrix  # n x E, sums edge rows into their destination

    @property
    def size(self):
        return self.dst.size


def _edge_index(g: Graph, self_loops: bool) -> EdgeIndex:
    coo = g.adj.tocoo()
    dst, src = coo.row.astype(np.int64), coo.col.astype(np.int64)
    if self_loops:
        loops = np.arange(g.n)
        dst, src = np.concatenate([dst, loops]), np.concatenate([src, loops])
    order = np.lexsort((src, dst))
    dst, src = dst[order], src[order]
    gather = sp.csr_matrix((np.ones(dst.size), (dst, np.arange(dst.size))), shape=(g.n, dst.size))
    return EdgeIndex(dst, src, gather)


def edge_index(g: Graph, self_loops: bool) -> EdgeIndex:
    return cached(g, ("edge_index", self_loops), lambda: _edge_index(g, self_loops))


def _feature_operand(g: Graph):
    X = g.features
    if X.size and np.count_nonzero(X) < 0.1 * X.size:
        return sp.csr_matrix(X)
    return X


def _segment_max(values, ei: EdgeIndex, n):
    out = np.full(n, -np.inf)
    np.maximum.at(out, ei.dst, values)
    return out


# layers; each takes the tape, the parameter lookup and Var inputs

def universal_encode(X, W_p, b_p, d_out):
    """AdaptiveAvgPool1D(ReLU(LayerNorm(X W_p + b_p)))."""
    if isinstance(W_p, Var):
        if sp.issparse(X):
            proj = ad.spmm(X, W_p)
        else:
            proj = W_p.tape.const(X) @ W_p
        return ad.adaptive_avg_pool_1d(ad.relu(ad.layer_norm(proj + b_p)), d_out)
    W_p = np.asarray(W_p)
    if d_out > W_p.shape[1]:
        raise ad.ShapeError(f"d_out {d_out} exceeds d_h {W_p.shape[1]}")
    pre = np.asarray(X @ W_p) + b_p
    return ad.adaptive_avg_pool_1d(np.maximum(ad.layer_norm(pre), 0.0), d_out)


def _act(x, last):
    return x if last else ad.relu(x)


def gcn_layer(H: Var, a_norm, W: Var, last=False) -> Var:
    return _act(ad.spmm(a_norm, H @ W), last)


def attention_head(H: Var, g: Graph, W: Var, a: Var, P=None):
    """One GAT/PAGNN head. Returns (output Var n x ph, attention Var over edges)."""
    tape = H.tape
    ei = edge_index(g, True)
    Wh = H @ W
    ph = W.shape[1]
    a_dst = a[np.arange(ph)]
    a_src = a[np.arange(ph, 2 * ph)]
    logits = (Wh @ a_dst)[ei.dst] + (Wh @ a_src)[ei.src]
    if P is not None:
        a_pe = a[np.arange(2 * ph, a.shape[0])]
        logits = logits + tape.const(P[ei.dst] - P[ei.src]) @ a_pe
    e = ad.leaky_relu(logits, LEAKY_SLOPE)
    shift = tape.const(_segment_max(e.value[:, 0], ei, g.n)[ei.dst][:, None])
    e = e - shift
    log_denom = ad.log(ad.spmm(ei.gather, ad.exp(e)))
    alpha = ad.exp(e - log_denom[ei.dst])
    out = ad.spmm(ei.gather, alpha * Wh[ei.src])
    return out, alpha


def gat_layer(H: Var, g: Graph, Ws, As, last=False, P=None) -> Var:
    heads = [attention_head(H, g, W, a, P)[0] for W, a in zip(Ws, As)]
    if last:
        out = heads[0]
        for h in heads[1:]:
            out = out + h
        return out * (1.0 / len(heads)) if len(heads) > 1 else out
    return ad.relu(ad.concat(heads, axis=1) if len(heads) > 1 else heads[0])


def pagnn_layer(H: Var, g: Graph, P, Ws, As, last=False) -> Var:
    return gat_layer(H, g, Ws, As, last, P=np.asarray(P, dtype=np.float64))


def sample_mean_matrix(g: Graph, sample_size: int, seed) -> sp.csr_matrix:
    """Row i averages up to `sample_size` neighbours of i drawn without replacement."""
    if sample_size < 1:
        raise ValueError("sample_size must be >= 1")
    adj = g.adj
    deg = np.diff(adj.indptr)
    row = np.repeat(np.arange(g.n), deg)
    col = adj.indices
    if np.any(deg > sample_size):
        rng = np.random.default_rng(seed)
        key = rng.random(col.size)
        order = np.lexsort((key, row))
        rank = np.empty(col.size, dtype=np.int64)
        rank[order] = np.arange(col.size) - np.repeat(adj.indptr[:-1], deg)
        keep = rank < sample_size
        row, col = row[keep], col[keep]
    cnt = np.minimum(deg, sample_size).astype(np.float64)
    vals = 1.0 / cnt[row]
    out = sp.csr_matrix((vals, (row, col)), shape=(g.n, g.n))
    out.sort_indices()
    return out


def sage_layer(H: Var, g: Graph, W: Var, sample_size: int, seed, last=False) -> Var:
    M = sample_mean_matrix(g, sample_size, seed)
    return _act(ad.concat([H, ad.spmm(M, H)], axis=1) @ W, last)


def gin_layer(H: Var, g: Graph, W1, b1, W2, b2, eps, last=False) -> Var:
    z = H * (eps + 1.0) + ad.spmm(g.adj, H)
    return _act(ad.relu(z @ W1 + b1) @ W2 + b2, last)


def mpnn_layer(H: Var, g: Graph, Wm, bm, Wu, bu, last=False) -> Var:
    """m_v = sum_u ReLU([h_v || h_u] Wm + bm); h'_v = act([h_v || m_v] Wu + bu).

    The constant edge feature e_uv = 1 enters the message layer only through bm.
    """
    ei = edge_index(g, False)
    if ei.size:
        msg = ad.relu(ad.concat([H[ei.dst], H[ei.src]], axis=1) @ Wm + bm)
        m = ad.spmm(ei.gather, msg)
    else:
        m = H.tape.const(np.zeros((g.n, Wm.shape[1])))
    return _act(ad.concat([H, m], axis=1) @ Wu + bu, last)


def fuse_all(Zs, mode="sum", proj=None):
    if len(Zs) != len(ARCHITECTURES):
        raise ad.ShapeError(f"fusion expects {len(ARCHITECTURES)} inputs, got {len(Zs)}")
    shapes = {z.shape for z in Zs}
    if len(shapes) != 1:
        raise ad.ShapeError(f"fusion inputs disagree in shape: {sorted(shapes)}")
    if mode == "sum":
        out = Zs[0]
        for z in Zs[1:]:
            out = out + z
        return out
    if mode == "concat":
        return ad.concat(Zs, axis=1) @ proj
    raise ValueError(f"unknown fusion mode {mode!r}")


def positional_encodings(g: Graph, k: int) -> np.ndarray:
    def build():
        kk = min(k, g.n - 1)
        P = laplacian_positional_encodings(g, kk) if kk >= 1 else np.zeros((g.n, 0))
        if kk < k:
            P = np.hstack([P, np.zeros((g.n, k - kk))])
        return P
    return cached(g, ("pe", k), build)


def _run_arch(spec, arch, pv, H, g, seed):
    a_norm = cached(g, "a_norm", lambda: normalized_adjacency(g))
    last_l = spec.layers - 1
    for l in range(spec.layers):
        p = f"{arch}.l{l}"
        last = l == last_l
        if arch == "GCN":
            H = gcn_layer(H, a_norm, pv[f"{p}.W"], last)
        elif arch in ("GAT", "PAGNN"):
            heads = spec.heads_at(l)
            Ws = [pv[f"{p}.W{h}"] for h in range(heads)]
            As = [pv[f"{p}.a{h}"] for h in range(heads)]
            if arch == "GAT":
                H = gat_layer(H, g, Ws, As, last)
            else:
                H = pagnn_layer(H, g, positional_encodings(g, spec.pe_dim), Ws, As, last)
        elif arch == "SAGE":
            H = sage_layer(H, g, pv[f"{p}.W"], spec.sample_size, mix(seed, l), last)
        elif arch == "GIN":
            eps = pv[f"{p}.eps"]
            H = gin_layer(H, g, pv[f"{p}.W1"], pv[f"{p}.b1"], pv[f"{p}.W2"], pv[f"{p}.b2"], eps, last)
        elif arch == "MPNN":
            H = mpnn_layer(H, g, pv[f"{p}.Wm"], pv[f"{p}.bm"], pv[f"{p}.Wu"], pv[f"{p}.bu"], last)
    return H


def bind(tape: Tape, spec: EncoderSpec, params: ParameterSet, trainable=True) -> dict:
    """Put the encoder's tensors on the tape; returns name -> Var."""
    shapes = parameter_shapes(spec, params.tensors["universal.W_p"].shape[0]
                              if "universal.W_p" in params else 0)
    pv = {}
    for name, shape in shapes.items():
        if name not in params:
            raise SpecMismatch(f"parameter {name!r} missing for {spec.architecture}")
        val = params[name]
        if tuple(val.shape) != tuple(shape):
            raise SpecMismatch(f"parameter {name!r} has shape {val.shape}, spec needs {shape}")
        trainable_here = trainable and not (name.endswith(".eps") and not spec.eps_learnable)
        pv[name] = tape.leaf(val, param=trainable_here, name=name)
    return pv


def forward(spec: EncoderSpec, pv: dict, g: Graph, seed: int) -> Var:
    W_p = pv["universal.W_p"]
    if W_p.shape[0] != g.d_in:
        raise SpecMismatch(f"W_p expects {W_p.shape[0]} input features, graph has {g.d_in}")
    X = cached(g, "features", lambda: _feature_operand(g))
    H0 = universal_encode(X, W_p, pv["universal.b_p"], spec.universal_width)
    if spec.architecture != "ALL":
        return _run_arch(spec, spec.architecture, pv, H0, g, seed)
    Zs = [_run_arch(spec, arch, pv, H0, g, seed) for arch in ARCHITECTURES]
    return fuse_all(Zs, spec.fusion, pv.get("ALL.proj"))


def encode(spec: EncoderSpec, params: ParameterSet, g: Graph, seed: int = 0) -> np.ndarray:
    tape = Tape()
    pv = bind(tape, spec, params, trainable=False)
    return forward(spec, pv, g, seed).value.copy()


# checkpoints

def save_checkpoint(path, params: ParameterSet, meta=None):
    """Layout: uint64 LE index length, JSON index, then row-major float64 LE tensors."""
    entries, blobs, offset = [], [], 0
    for name in sorted(params.tensors):
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    index = {"version": CKPT_VERSION, "init_seed": params.init_seed, "meta": meta or {}, "tensors": entries}
    head = json.dumps(index, sort_keys=True).encode("utf-8")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Returns (ParameterSet, meta)."""
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack("<Q", raw[:8])
    index = json.loads(raw[8:8 + hlen].decode("utf-8"))
    if index.get("version") != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {index.get('version')!r}")
    body = raw[8 + hlen:]
    tensors = {}
    for e in index["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return ParameterSet(tensors, index.get("init_seed", 0)), index.get("meta", {})


def spec_to_dict(spec: EncoderSpec) -> dict:
    return asdict(spec)


def spec_from_dict(d: dict) -> EncoderSpec:
    return EncoderSpec(**d)
