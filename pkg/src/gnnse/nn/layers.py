"""GCN, GAT, linear head and dense layers with hand-written backward passes.

Message-passing layers take node-major activations of shape
``(n, batch, features)``; a plain ``(n, features)`` matrix is treated as a
batch of one.
"""
from __future__ import annotations

import numpy as np

from .graph import GraphOperator


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape if shape is not None else (fan_in, fan_out))


def as_graph(graph, self_inclusive: bool = True) -> GraphOperator:
    return graph if isinstance(graph, GraphOperator) else GraphOperator(graph, self_inclusive)


def _matmul(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``x @ W`` over the last axis as a single 2-D GEMM."""
    return (x.reshape(-1, x.shape[-1]) @ W).reshape(x.shape[:-1] + (W.shape[1],))


def _check_in(x: np.ndarray, d_in: int, name: str) -> None:
    if x.shape[-1] != d_in:
        raise ValueError(f"{name}: expected {d_in} input features, got {x.shape[-1]}")


class Layer:
    params: dict[str, np.ndarray]

    def forward(self, x, graph=None):
        raise NotImplementedError

    def backward(self, dout, cache):
        raise NotImplementedError


class GcnLayer(Layer):
    """``relu(A_norm @ X @ W)``."""

    kind = "gcn"

    def __init__(self, W: np.ndarray):
        self.params = {"W": np.asarray(W, dtype=float)}

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "GcnLayer":
        return cls(glorot(rng, d_in, d_out))

    def forward(self, x, graph: GraphOperator):
        W = self.params["W"]
        _check_in(x, W.shape[0], "gcn")
        Z = graph.propagate(_matmul(x, W))
        return np.maximum(Z, 0.0), (x, Z, graph)

    def backward(self, dout, cache):
        x, Z, graph = cache
        W = self.params["W"]
        dZ = dout * (Z > 0)
        dH = graph.propagate(dZ, transpose=True)
        dW = x.reshape(-1, W.shape[0]).T @ dH.reshape(-1, W.shape[1])
        return _matmul(dH, W.T), {"W": dW}


class GatLayer(Layer):
    """Single-head attention over the closed neighbourhood, followed by ReLU.

    The first half of ``a`` scores the receiving node, the second half the
    sending node.
    """

    kind = "gat"

    def __init__(self, W: np.ndarray, a: np.ndarray, leaky_slope: float = 0.2):
        if not 0 < leaky_slope < 1:
            raise ValueError("leaky_slope must lie in (0, 1)")
        W = np.asarray(W, dtype=float)
        a = np.asarray(a, dtype=float).reshape(-1)
        if a.size != 2 * W.shape[1]:
            raise ValueError(f"attention vector needs {2 * W.shape[1]} entries, got {a.size}")
        self.params = {"W": W, "a": a}
        self.leaky_slope = leaky_slope

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator, leaky_slope: float = 0.2):
        W = glorot(rng, d_in, d_out)
        a = glorot(rng, 2 * d_out, 1, (2 * d_out,))
        return cls(W, a, leaky_slope)

    def attention(self, x, graph: GraphOperator):
        """Per-edge coefficients (edges, batch) and intermediates."""
        W, a = self.params["W"], self.params["a"]
        _check_in(x, W.shape[0], "gat")
        d = W.shape[1]
        H = _matmul(x, W)
        s_dst = H @ a[:d]
        s_src = H @ a[d:]
        raw = s_dst[graph.dst] + s_src[graph.src]
        e = np.where(raw > 0, raw, self.leaky_slope * raw)
        ex = np.exp(e - graph.segment_max(e)[graph.dst])
        alpha = ex / graph.segment_sum(ex)[graph.dst]
        return alpha, H, raw

    def forward(self, x, graph: GraphOperator):
        alpha, H, raw = self.attention(x, graph)
        Z = graph.segment_sum(alpha[..., None] * H[graph.src])
        return np.maximum(Z, 0.0), (x, H, raw, alpha, Z, graph)

    def backward(self, dout, cache):
        x, H, raw, alpha, Z, graph = cache
        W, a = self.params["W"], self.params["a"]
        d = W.shape[1]
        dZ = dout * (Z > 0)
        dM = dZ[graph.dst]
        dH = graph.scatter_to_src(alpha[..., None] * dM)
        dalpha = np.einsum("ebd,ebd->eb", dM, H[graph.src])
        de = alpha * (dalpha - graph.segment_sum(alpha * dalpha)[graph.dst])
        draw = de * np.where(raw > 0, 1.0, self.leaky_slope)
        ds_dst = graph.segment_sum(draw)
        ds_src = graph.scatter_to_src(draw)
        dH += ds_dst[..., None] * a[:d] + ds_src[..., None] * a[d:]
        da = np.concatenate([np.einsum("nbd,nb->d", H, ds_dst), np.einsum("nbd,nb->d", H, ds_src)])
        dW = x.reshape(-1, W.shape[0]).T @ dH.reshape(-1, d)
        return _matmul(dH, W.T), {"W": dW, "a": da}


class Dense(Layer):
    """Affine map ``x @ W + b`` with optional ReLU; also serves as the output head."""

    kind = "dense"

    def __init__(self, W: np.ndarray, b: np.ndarray, relu: bool = False):
        W = np.asarray(W, dtype=float)
        b = np.asarray(b, dtype=float).reshape(-1)
        if b.size != W.shape[1]:
            raise ValueError("bias width must match W columns")
        self.params = {"W": W, "b": b}
        self.relu = relu

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator, relu: bool = False):
        return cls(glorot(rng, d_in, d_out), np.zeros(d_out), relu)

    def forward(self, x, graph=None):
        W, b = self.params["W"], self.params["b"]
        _check_in(x, W.shape[0], self.kind)
        y = _matmul(x, W) + b
        if self.relu:
            y = np.maximum(y, 0.0)
        return y, (x, y)

    def backward(self, dout, cache):
        x, y = cache
        W = self.params["W"]
        if self.relu:
            dout = dout * (y > 0)
        g = dout.reshape(-1, W.shape[1])
        return _matmul(dout, W.T), {"W": x.reshape(-1, W.shape[0]).T @ g, "b": g.sum(axis=0)}


class LinearHead(Dense):
    """Per-node linear read-out to (magnitude, angle); no activation."""

    kind = "head"

    def __init__(self, W: np.ndarray, b: np.ndarray):
        super().__init__(W, b, relu=False)

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator):
        return cls(glorot(rng, d_in, d_out), np.zeros(d_out))


# -------------------------------------------------------- functional entry points

def _batched(x: np.ndarray):
    x = np.asarray(x, dtype=float)
    return (x[:, None, :], True) if x.ndim == 2 else (x, False)


def gcn_forward(x, adj, layer: GcnLayer, self_inclusive: bool = True) -> np.ndarray:
    xb, squeeze = _batched(x)
    out, _ = layer.forward(xb, as_graph(adj, self_inclusive))
    return out[:, 0] if squeeze else out


def gat_forward(x, adj, layer: GatLayer) -> np.ndarray:
    xb, squeeze = _batched(x)
    out, _ = layer.forward(xb, as_graph(adj))
    return out[:, 0] if squeeze else out


def gat_attention(x, adj, layer: GatLayer) -> np.ndarray:
    """Dense (n, n) attention matrix for a single sample; rows sum to 1."""
    graph = as_graph(adj)
    xb, _ = _batched(x)
    alpha, _, _ = layer.attention(xb, graph)
    out = np.zeros((graph.n, graph.n))
    out[graph.dst, graph.src] = alpha[:, 0]
    return out


def linear_head(x, head: Dense) -> np.ndarray:
    return head.forward(np.asarray(x, dtype=float))[0]


def loss_mse(pred: np.ndarray, label: np.ndarray):
    """Mean squared error and its gradient w.r.t. ``pred``."""
    diff = np.asarray(pred, dtype=float) - np.asarray(label, dtype=float)
    return float(np.mean(diff**2)), 2.0 * diff / diff.size
