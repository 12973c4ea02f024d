"""Eager reverse-mode autodiff over dense float64 numpy arrays.

Every op computes its value immediately and appends a node to a Tape.
`backward` walks the tape in reverse and returns gradients for the nodes
that were registered as parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

LN_EPS = 1e-5
COS_EPS = 1e-12
KINK_OPS = ("relu", "leaky_relu", "hinge")


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass
class Node:
    kind: str
    inputs: tuple
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    cache: object = None
    needs_grad: bool = False
    name: str | None = None
    param: bool = False


class Tape:
    """Ordered record of computed nodes; node ids are list positions."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, node):
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value, param=False, name=None):
        arr = np.array(value, dtype=np.float64)
        return Var(self, self._push(Node("leaf", (), arr, needs_grad=param, name=name, param=param)))

    def param(self, name, value):
        return self.leaf(value, param=True, name=name)

    def const(self, value):
        return self.leaf(value, param=False)

    def value(self, node_id):
        return self.nodes[node_id].value

    def kink_signature(self):
        """Sign pattern of every ReLU/hinge input; used to spot kink crossings."""
        parts = []
        for node in self.nodes:
            if node.kind in KINK_OPS:
                parts.append(self.nodes[node.inputs[0]].value.ravel() > 0)
        return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


class Var:
    """Handle to a tape node with operator sugar."""

    __slots__ = ("tape", "id")

    def __init__(self, tape, node_id):
        self.tape = tape
        self.id = node_id

    @property
    def value(self):
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other):
        if isinstance(other, Var):
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return op(self.tape, "add", (self, self._lift(other)))

    __radd__ = __add__

    def __sub__(self, other):
        return op(self.tape, "sub", (self, self._lift(other)))

    def __rsub__(self, other):
        return op(self.tape, "sub", (self._lift(other), self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return op(self.tape, "scalar_mul", (self,), c=float(other))
        return op(self.tape, "mul", (self, self._lift(other)))

    __rmul__ = __mul__

    def __neg__(self):
        return op(self.tape, "scalar_mul", (self,), c=-1.0)

    def __matmul__(self, other):
        return op(self.tape, "matmul", (self, self._lift(other)))

    @property
    def T(self):
        return op(self.tape, "transpose", (self,))

    def __getitem__(self, idx):
        return op(self.tape, "row_slice", (self,), index=np.asarray(idx, dtype=np.int64))

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _bshape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from None


def pool_matrix(d_h, d_out):
    """Column j averages input positions floor(j*d_h/d_out) .. ceil((j+1)*d_h/d_out) - 1."""
    if not 1 <= d_out <= d_h:
        raise ShapeError(f"adaptive pooling needs 1 <= d_out <= d_h, got d_out={d_out}, d_h={d_h}")
    P = np.zeros((d_h, d_out))
    for j in range(d_out):
        lo = (j * d_h) // d_out
        hi = -((-(j + 1) * d_h) // d_out)
        P[lo:hi, j] = 1.0 / (hi - lo)
    return P


# forward(vals, attrs) -> (out, cache); backward(g, vals, out, cache, attrs) -> grads per input

def _matmul_f(v, a):
    x, w = v
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"matmul shapes {x.shape} and {w.shape}")
    return x @ w, None


def _matmul_b(g, v, out, cache, a):
    x, w = v
    return g @ w.T, x.T @ g


def _add_f(v, a):
    _bshape(*v)
    return v[0] + v[1], None


def _add_b(g, v, out, cache, a):
    return _unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)


def _sub_f(v, a):
    _bshape(*v)
    return v[0] - v[1], None


def _sub_b(g, v, out, cache, a):
    return _unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)


def _mul_f(v, a):
    _bshape(*v)
    return v[0] * v[1], None


def _mul_b(g, v, out, cache, a):
    return _unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)


def _smul_f(v, a):
    return v[0] * a["c"], None


def _smul_b(g, v, out, cache, a):
    return (g * a["c"],)


def _sigmoid_f(v, a):
    return expit(v[0]), None


def _sigmoid_b(g, v, out, cache, a):
    return (g * out * (1.0 - out),)


def _relu_f(v, a):
    return np.maximum(v[0], 0.0), None


def _relu_b(g, v, out, cache, a):
    return (g * (v[0] > 0),)


def _lrelu_f(v, a):
    x = v[0]
    return np.where(x > 0, x, a["alpha"] * x), None


def _lrelu_b(g, v, out, cache, a):
    return (g * np.where(v[0] > 0, 1.0, a["alpha"]),)


def _tanh_f(v, a):
    return np.tanh(v[0]), None


def _tanh_b(g, v, out, cache, a):
    return (g * (1.0 - out * out),)


def _exp_f(v, a):
    return np.exp(v[0]), None


def _exp_b(g, v, out, cache, a):
    return (g * out,)


def _log_f(v, a):
    x = v[0]
    if x.size and np.min(x) <= 0:
        raise DomainError(f"log of non-positive value {float(np.min(x))!r}")
    return np.log(x), None


def _log_b(g, v, out, cache, a):
    return (g / v[0],)


def _softmax_f(v, a):
    x = v[0]
    ax = a["axis"]
    e = np.exp(x - np.max(x, axis=ax, keepdims=True))
    return e / e.sum(axis=ax, keepdims=True), None


def _softmax_b(g, v, out, cache, a):
    ax = a["axis"]
    return (out * (g - np.sum(g * out, axis=ax, keepdims=True)),)


def _sum_f(v, a):
    return np.asarray(np.sum(v[0], axis=a["axis"], keepdims=a["keepdims"])), None


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _sum_b(g, v, out, cache, a):
    return (np.array(_expand(g, v[0].shape, a["axis"], a["keepdims"])),)


def _mean_f(v, a):
    return np.asarray(np.mean(v[0], axis=a["axis"], keepdims=a["keepdims"])), None


def _mean_b(g, v, out, cache, a):
    x = v[0]
    count = x.size if a["axis"] is None else x.shape[a["axis"]]
    return (np.array(_expand(g, x.shape, a["axis"], a["keepdims"])) / count,)


def _concat_f(v, a):
    ax = a["axis"]
    ref = list(v[0].shape)
    for x in v[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or any(p != q for i, (p, q) in enumerate(zip(ref, other)) if i != ax % len(ref)):
            raise ShapeError(f"concat shapes {[t.shape for t in v]} along axis {ax}")
    return np.concatenate(v, axis=ax), None


def _concat_b(g, v, out, cache, a):
    cuts = np.cumsum([x.shape[a["axis"]] for x in v])[:-1]
    return tuple(np.split(g, cuts, axis=a["axis"]))


def _rows_f(v, a):
    idx = a["index"]
    if idx.size and (idx.min() < -v[0].shape[0] or idx.max() >= v[0].shape[0]):
        raise ShapeError(f"row index out of range for shape {v[0].shape}")
    return v[0][idx], None


def _rows_b(g, v, out, cache, a):
    grad = np.zeros_like(v[0])
    np.add.at(grad, a["index"], g)
    return (grad,)


def _transpose_f(v, a):
    return v[0].T.copy(), None


def _transpose_b(g, v, out, cache, a):
    return (g.T,)


def _spmm_f(v, a):
    S, x = a["matrix"], v[0]
    if x.ndim != 2 or S.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse-dense matmul shapes {S.shape} and {x.shape}")
    return np.asarray(S @ x), None


def _spmm_b(g, v, out, cache, a):
    return (np.asarray(a["matrix"].T @ g),)


def _sqfrob_f(v, a):
    return np.asarray(np.sum(v[0] * v[0])), None


def _sqfrob_b(g, v, out, cache, a):
    return (2.0 * g * v[0],)


def _cos_f(v, a):
    x, y = v
    if x.shape != y.shape or x.ndim != 2:
        raise ShapeError(f"cosine rows need equal 2-d shapes, got {x.shape} and {y.shape}")
    nx = np.sqrt(np.sum(x * x, axis=1))
    ny = np.sqrt(np.sum(y * y, axis=1))
    cx = np.maximum(nx, COS_EPS)
    cy = np.maximum(ny, COS_EPS)
    dot = np.sum(x * y, axis=1)
    out = dot / (cx * cy)
    return out, (nx, ny, cx, cy)


def _cos_b(g, v, out, cache, a):
    x, y = v
    nx, ny, cx, cy = cache
    gc = g[:, None]
    dx = y / (cx * cy)[:, None]
    dy = x / (cx * cy)[:, None]
    dx = dx - np.where((nx > COS_EPS)[:, None], out[:, None] * x / (cx * cx)[:, None], 0.0)
    dy = dy - np.where((ny > COS_EPS)[:, None], out[:, None] * y / (cy * cy)[:, None], 0.0)
    return gc * dx, gc * dy


def _ln_f(v, a):
    x = v[0]
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"layer norm needs an n x d matrix with d >= 1, got {x.shape}")
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    s = np.sqrt(var + a["eps"])
    xhat = (x - mu) / s
    return xhat, s


def _ln_b(g, v, out, s, a):
    gm = g.mean(axis=1, keepdims=True)
    gx = (g * out).mean(axis=1, keepdims=True)
    return ((g - gm - out * gx) / s,)


def _pool_f(v, a):
    x = v[0]
    if x.ndim != 2:
        raise ShapeError(f"adaptive pooling needs a matrix, got {x.shape}")
    P = pool_matrix(x.shape[1], a["d_out"])
    return x @ P, P


def _pool_b(g, v, out, P, a):
    return (g @ P.T,)


OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_f, _matmul_b),
    "add": (_add_f, _add_b),
    "sub": (_sub_f, _sub_b),
    "mul": (_mul_f, _mul_b),
    "scalar_mul": (_smul_f, _smul_b),
    "sigmoid": (_sigmoid_f, _sigmoid_b),
    "relu": (_relu_f, _relu_b),
    "leaky_relu": (_lrelu_f, _lrelu_b),
    "tanh": (_tanh_f, _tanh_b),
    "exp": (_exp_f, _exp_b),
    "log": (_log_f, _log_b),
    "softmax": (_softmax_f, _softmax_b),
    "mean": (_mean_f, _mean_b),
    "sum": (_sum_f, _sum_b),
    "concat": (_concat_f, _concat_b),
    "row_slice": (_rows_f, _rows_b),
    "transpose": (_transpose_f, _transpose_b),
    "spmm": (_spmm_f, _spmm_b),
    "sqfrob": (_sqfrob_f, _sqfrob_b),
    "hinge": (_relu_f, _relu_b),
    "cos_rows": (_cos_f, _cos_b),
    "layer_norm": (_ln_f, _ln_b),
    "adaptive_pool": (_pool_f, _pool_b),
}


def record_op(tape: Tape, kind: str, inputs: Sequence[int], attrs: dict | None = None) -> int:
    if kind not in OPS:
        raise ValueError(f"unknown op kind {kind!r}")
    attrs = dict(attrs or {})
    for i in inputs:
        if not 0 <= i < len(tape.nodes):
            raise ValueError(f"input node {i} not on tape")
    vals = [tape.nodes[i].value for i in inputs]
    out, cache = OPS[kind][0](vals, attrs)
    out = np.asarray(out, dtype=np.float64)
    needs = any(tape.nodes[i].needs_grad for i in inputs)
    return tape._push(Node(kind, tuple(inputs), out, attrs, cache, needs))


def op(tape, kind, inputs, **attrs):
    return Var(tape, record_op(tape, kind, [v.id for v in inputs], attrs))


def backward(tape: Tape, loss_node) -> dict:
    """Gradients of a scalar node for every parameter leaf, keyed by name (or '#id')."""
    lid = loss_node.id if isinstance(loss_node, Var) else int(loss_node)
    lval = tape.nodes[lid].value
    if lval.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {lval.shape}")
    grads: dict[int, np.ndarray] = {lid: np.ones_like(lval)}
    for nid in range(lid, -1, -1):
        node = tape.nodes[nid]
        g = grads.get(nid)
        if g is None or node.kind == "leaf" or not node.needs_grad:
            continue
        vals = [tape.nodes[i].value for i in node.inputs]
        parts = OPS[node.kind][1](g, vals, node.value, node.cache, node.attrs)
        for i, gi in zip(node.inputs, parts):
            if not tape.nodes[i].needs_grad:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = np.array(gi, dtype=np.float64)
        if nid != lid:
            del grads[nid]
    out = {}
    for nid, node in enumerate(tape.nodes[: lid + 1]):
        if node.param:
            key = node.name if node.name is not None else f"#{nid}"
            out[key] = grads.get(nid, np.zeros_like(node.value))
    return out


# functional spellings

def matmul(a, b):
    return op(a.tape, "matmul", (a, b))


def sigmoid(x):
    return op(x.tape, "sigmoid", (x,))


def relu(x):
    return op(x.tape, "relu", (x,))


def leaky_relu(x, alpha=0.2):
    return op(x.tape, "leaky_relu", (x,), alpha=float(alpha))


def tanh(x):
    return op(x.tape, "tanh", (x,))


def exp(x):
    return op(x.tape, "exp", (x,))


def log(x):
    return op(x.tape, "log", (x,))


def softmax(x, axis=-1):
    return op(x.tape, "softmax", (x,), axis=axis)


def tsum(x, axis=None, keepdims=False):
    return op(x.tape, "sum", (x,), axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return op(x.tape, "mean", (x,), axis=axis, keepdims=keepdims)


def concat(xs, axis=-1):
    xs = list(xs)
    return op(xs[0].tape, "concat", xs, axis=axis)


def rows(x, index):
    return x[index]


def transpose(x):
    return x.T


def spmm(matrix, x):
    m = matrix if sp.issparse(matrix) else sp.csr_matrix(matrix)
    return op(x.tape, "spmm", (x,), matrix=m)


def squared_frobenius(x):
    return op(x.tape, "sqfrob", (x,))


def hinge(x):
    return op(x.tape, "hinge", (x,))


def cosine_rows(a, b):
    return op(a.tape, "cos_rows", (a, b))


def layer_norm(x, eps=LN_EPS):
    """Row-wise normalisation with no affine part."""
    if isinstance(x, Var):
        return op(x.tape, "layer_norm", (x,), eps=eps)
    return _ln_f([np.asarray(x, dtype=np.float64)], {"eps": eps})[0]


def adaptive_avg_pool_1d(x, d_out):
    if isinstance(x, Var):
        return op(x.tape, "adaptive_pool", (x,), d_out=int(d_out))
    return _pool_f([np.asarray(x, dtype=np.float64)], {"d_out": int(d_out)})[0]


@dataclass
class GradCheck:
    max_rel_error: float
    checked: int
    skipped: int
    raw_max_rel_error: float


def grad_check_detail(f, params, step=1e-5) -> GradCheck:
    """Central differences against `backward`.

    `f(tape, *vars)` must return a scalar Var. Entries whose +/- perturbation
    flips the sign of any ReLU/hinge input straddle a kink and are skipped.

    `raw_max_rel_error` is the plain |a - n| / max(1e-8, |n|). `max_rel_error`
    additionally counts an entry as exact when |a - n| is below the roundoff
    floor of the difference quotient, 64 * eps * max|f(x +/- h)| / h; this
    matters for gradients that are identically zero (e.g. softmax-invariant
    attention terms) where n is pure rounding noise.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]

    def run(values):
        tape = Tape()
        vs = [tape.param(f"p{i}", v) for i, v in enumerate(values)]
        out = f(tape, *vs)
        val = out.value
        if not np.all(np.isfinite(val)):
            raise DomainError("non-finite forward value in grad_check")
        return tape, out, float(val.reshape(-1)[0]) if val.size == 1 else val

    tape, out, _ = run(params)
    analytic = backward(tape, out)
    base_sig = tape.kink_signature()
    worst, raw_worst, checked, skipped = 0.0, 0.0, 0, 0
    eps = np.finfo(np.float64).eps
    for i, p in enumerate(params):
        ga = analytic[f"p{i}"]
        for j in range(p.size):
            vals = [q.copy() for q in params]
            flat = vals[i].reshape(-1)
            flat[j] = p.reshape(-1)[j] + step
            tp, _, fp = run(vals)
            flat[j] = p.reshape(-1)[j] - step
            tm, _, fm = run(vals)
            if not (np.array_equal(tp.kink_signature(), base_sig)
                    and np.array_equal(tm.kink_signature(), base_sig)):
                skipped += 1
                continue
            num = (fp - fm) / (2 * step)
            diff = abs(ga.reshape(-1)[j] - num)
            err = diff / max(1e-8, abs(num))
            raw_worst = max(raw_worst, err)
            floor = 64 * eps * max(abs(fp), abs(fm)) / step
            worst = max(worst, 0.0 if diff <= floor else err)
            checked += 1
    return GradCheck(worst, checked, skipped, raw_worst)


def grad_check(f, params, step=1e-5) -> float:
    return grad_check_detail(f, params, step).max_rel_error
