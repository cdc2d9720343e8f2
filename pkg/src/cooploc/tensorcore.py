"""Minimal dense-network numerical kernel with reverse-mode autodiff.

Everything is float64. Forward ops build a graph of `Tensor` nodes; calling
`backward(loss)` walks it in reverse topological order and accumulates
gradients into every node, including parameter leaves. This is enough for
BPTT through recurrent rollouts and across inter-vehicle message edges.
"""
from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field

import numpy as np


class NumericHealthError(RuntimeError):
    """Raised when a computation produces NaN or Inf."""


_strict = True


@contextlib.contextmanager
def relaxed_checks():
    """Skip per-op finite checks inside hot loops; callers re-check results."""
    global _strict
    old = _strict
    _strict = False
    try:
        yield
    finally:
        _strict = old


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if _strict and not np.all(np.isfinite(arr)):
            raise NumericHealthError("non-finite values entered the graph")
        self.data = arr
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)  # copy: g may be a shared buffer
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / linear-algebra ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, (a, b))

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out._backward = bwd
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data, (a, b))

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    out._backward = bwd
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, (a, b))

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = bwd
    return out


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data * c, (a,))

    def bwd(g):
        _accum(a, g * c)

    out._backward = bwd
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data @ b.data, (a, b))

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    out._backward = bwd
    return out


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.T, (a,))

    def bwd(g):
        _accum(a, g.T)

    out._backward = bwd
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0), (a,))

    def bwd(g):
        _accum(a, g * mask)

    out._backward = bwd
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s, (a,))

    def bwd(g):
        _accum(a, g * s * (1.0 - s))

    out._backward = bwd
    return out


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    th = np.tanh(a.data)
    out = Tensor(th, (a,))

    def bwd(g):
        _accum(a, g * (1.0 - th * th))

    out._backward = bwd
    return out


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    rt = np.sqrt(a.data)
    out = Tensor(rt, (a,))

    def bwd(g):
        _accum(a, g * 0.5 / rt)

    out._backward = bwd
    return out


def concat(parts, axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    out._backward = bwd
    return out


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape), (a,))

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    out._backward = bwd
    return out


def affine(x, W, b) -> Tensor:
    """x @ W.T + b for row-batched x; fused forward/backward."""
    x, W, b = _as_tensor(x), _as_tensor(W), _as_tensor(b)
    out = Tensor(x.data @ W.data.T + b.data, (x, W, b))

    def bwd(g):
        _accum(x, g @ W.data)
        _accum(W, g.T @ x.data)
        _accum(b, g.sum(axis=0))

    out._backward = bwd
    return out


def gather_rows(a, idx) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx], (a,))

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    out._backward = bwd
    return out


def segment_sum(a, seg_ids, n_segments: int) -> Tensor:
    """Sum rows of `a` into `n_segments` output rows by segment id.

    Accumulation runs in row order of `a`, so a caller that fixes a canonical
    row order gets bit-reproducible sums.
    """
    a = _as_tensor(a)
    seg = np.asarray(seg_ids, dtype=np.intp)
    res = np.zeros((n_segments, a.data.shape[1]))
    np.add.at(res, seg, a.data)
    out = Tensor(res, (a,))

    def bwd(g):
        _accum(a, g[seg])

    out._backward = bwd
    return out


def sum_pool(vectors, width: int | None = None) -> Tensor:
    """Elementwise sum of equal-length vectors; empty list yields zeros."""
    if len(vectors) == 0:
        if width is None:
            raise ValueError("empty sum_pool requires an explicit width")
        return Tensor(np.zeros(width))
    vectors = [_as_tensor(v) for v in vectors]
    w = vectors[0].data.shape
    for v in vectors[1:]:
        if v.data.shape != w:
            raise ValueError("sum_pool inputs must share a shape")
    acc = vectors[0]
    for v in vectors[1:]:
        acc = add(acc, v)
    return acc


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    out._backward = bwd
    return out


def reduce_mean(a) -> Tensor:
    a = _as_tensor(a)
    return scale(reduce_sum(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# layers


@dataclass
class DenseLayer:
    W: Tensor  # (out, in)
    b: Tensor  # (out,)

    @property
    def in_dim(self):
        return self.W.data.shape[1]

    @property
    def out_dim(self):
        return self.W.data.shape[0]


@dataclass
class GruCell:
    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor


def dense_forward(layer: DenseLayer, x) -> Tensor:
    """W.x + b for a single vector, or row-wise for a 2-D batch."""
    x = _as_tensor(x)
    if x.data.ndim == 1:
        if x.data.shape[0] != layer.in_dim:
            raise ValueError(f"dense input length {x.data.shape[0]} != {layer.in_dim}")
        return reshape(affine(reshape(x, (1, -1)), layer.W, layer.b),
                       (layer.out_dim,))
    if x.data.shape[1] != layer.in_dim:
        raise ValueError(f"dense input width {x.data.shape[1]} != {layer.in_dim}")
    return affine(x, layer.W, layer.b)


def _gru_batched(cell: GruCell, x: Tensor, h_prev: Tensor) -> Tensor:
    """Fused GRU step on (n, in) x and (n, hidden) h_prev."""
    xd, hd = x.data, h_prev.data
    Wz, Wr, Wh = cell.W_z.data, cell.W_r.data, cell.W_h.data
    Uz, Ur, Uh = cell.U_z.data, cell.U_r.data, cell.U_h.data
    z = 1.0 / (1.0 + np.exp(-(xd @ Wz.T + hd @ Uz.T + cell.b_z.data)))
    r = 1.0 / (1.0 + np.exp(-(xd @ Wr.T + hd @ Ur.T + cell.b_r.data)))
    rh = r * hd
    c = np.tanh(xd @ Wh.T + rh @ Uh.T + cell.b_h.data)
    h_new = (1.0 - z) * hd + z * c
    parents = (x, h_prev, cell.W_z, cell.W_r, cell.W_h,
               cell.U_z, cell.U_r, cell.U_h, cell.b_z, cell.b_r, cell.b_h)
    out = Tensor(h_new, parents)

    def bwd(g):
        dz = g * (c - hd)
        dc = g * z
        dh = g * (1.0 - z)
        da_c = dc * (1.0 - c * c)
        drh = da_c @ Uh
        dr = drh * hd
        dh += drh * r
        da_r = dr * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        dx = da_c @ Wh + da_r @ Wr + da_z @ Wz
        dh += da_r @ Ur + da_z @ Uz
        _accum(x, dx)
        _accum(h_prev, dh)
        _accum(cell.W_z, da_z.T @ xd)
        _accum(cell.W_r, da_r.T @ xd)
        _accum(cell.W_h, da_c.T @ xd)
        _accum(cell.U_z, da_z.T @ hd)
        _accum(cell.U_r, da_r.T @ hd)
        _accum(cell.U_h, da_c.T @ rh)
        _accum(cell.b_z, da_z.sum(axis=0))
        _accum(cell.b_r, da_r.sum(axis=0))
        _accum(cell.b_h, da_c.sum(axis=0))

    out._backward = bwd
    return out


def gru_forward(cell: GruCell, x, h_prev) -> Tensor:
    """Standard GRU update; x and h_prev are vectors or matching 2-D batches.

    z = sigma(W_z x + U_z h + b_z), r = sigma(W_r x + U_r h + b_r),
    c = tanh(W_h x + U_h (r*h) + b_h), h' = (1-z)*h + z*c.
    """
    x, h_prev = _as_tensor(x), _as_tensor(h_prev)
    if x.data.ndim == 1:
        hidden = h_prev.data.shape[-1]
        out = _gru_batched(cell, reshape(x, (1, -1)), reshape(h_prev, (1, -1)))
        return reshape(out, (hidden,))
    return _gru_batched(cell, x, h_prev)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into `.grad` of every reachable node."""
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")

    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def init_adam(params, lr: float = 0.0005) -> AdamState:
    st = AdamState(lr=lr)
    st.m = [np.zeros_like(p.data) for p in params]
    st.v = [np.zeros_like(p.data) for p in params]
    return st


def adam_step(params, grads, state: AdamState) -> AdamState:
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError("gradient shape mismatch")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


# ---------------------------------------------------------------------------
# initialization


def glorot_uniform(out_dim: int, in_dim: int, rng: np.random.Generator) -> Tensor:
    a = np.sqrt(6.0 / (in_dim + out_dim))
    return Tensor(rng.uniform(-a, a, size=(out_dim, in_dim)))


def init_dense(in_dim: int, out_dim: int, rng: np.random.Generator) -> DenseLayer:
    return DenseLayer(W=glorot_uniform(out_dim, in_dim, rng), b=Tensor(np.zeros(out_dim)))


def init_gru(in_dim: int, hidden: int, rng: np.random.Generator) -> GruCell:
    def w():
        return glorot_uniform(hidden, in_dim, rng)

    def u():
        return glorot_uniform(hidden, hidden, rng)

    def b():
        return Tensor(np.zeros(hidden))

    return GruCell(W_z=w(), W_r=w(), W_h=w(), U_z=u(), U_r=u(), U_h=u(),
                   b_z=b(), b_r=b(), b_h=b())


def dense_params(layer: DenseLayer):
    return [layer.W, layer.b]


def gru_params(cell: GruCell):
    return [cell.W_z, cell.W_r, cell.W_h, cell.U_z, cell.U_r, cell.U_h,
            cell.b_z, cell.b_r, cell.b_h]


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, named_tensors: dict) -> None:
    arrays = {name: np.asarray(t.data if isinstance(t, Tensor) else t)
              for name, t in named_tensors.items()}
    header = json.dumps({"version": CHECKPOINT_VERSION,
                         "names": sorted(arrays.keys())})
    arrays["__header__"] = np.frombuffer(header.encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> dict:
    with np.load(path) as z:
        if "__header__" not in z:
            raise ValueError("not a checkpoint file: missing header")
        header = json.loads(bytes(z["__header__"]).decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        return {name: z[name].astype(np.float64) for name in header["names"]}
