"""Precomputed graph operators shared by the message-passing layers."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class GraphOperator:
    """Normalized adjacency and a dst-sorted edge list with self loops.

    ``self_inclusive`` selects whether neighbourhood sizes in the GCN
    normalisation count the node itself (degree + 1) or not (degree).
    """

    def __init__(self, adj, self_inclusive: bool = True):
        adj = np.asarray(adj).astype(bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {adj.shape}")
        adj = adj & ~np.eye(adj.shape[0], dtype=bool)
        self.adj = adj
        self.n = n = adj.shape[0]
        self.self_inclusive = self_inclusive
        deg = adj.sum(axis=1)
        size = deg + 1 if self_inclusive else np.maximum(deg, 1)
        closed = adj | np.eye(n, dtype=bool)
        dst, src = np.nonzero(closed)  # row-major: sorted by dst
        self.dst, self.src = dst, src
        self.n_edges = dst.size
        self.starts = np.searchsorted(dst, np.arange(n))
        self.closed_size = deg + 1
        w = 1.0 / np.sqrt(size[dst] * size[src])
        self.norm = sp.csr_matrix((w, (dst, src)), shape=(n, n))
        self.norm_t = self.norm.T.tocsr()
        ones, eidx = np.ones(self.n_edges), np.arange(self.n_edges)
        self.scatter_dst = sp.csr_matrix((ones, (dst, eidx)), shape=(n, self.n_edges))
        self.scatter_src = sp.csr_matrix((ones, (src, eidx)), shape=(n, self.n_edges))

    def propagate(self, H: np.ndarray, transpose: bool = False) -> np.ndarray:
        """Apply the normalized adjacency along the node axis of an (n, ...) array."""
        mat = self.norm_t if transpose else self.norm
        return (mat @ H.reshape(self.n, -1)).reshape(H.shape)

    def segment_sum(self, E: np.ndarray) -> np.ndarray:
        """Sum an (edges, ...) array into its destination nodes."""
        return (self.scatter_dst @ E.reshape(self.n_edges, -1)).reshape((self.n,) + E.shape[1:])

    def segment_max(self, E: np.ndarray) -> np.ndarray:
        return np.maximum.reduceat(E, self.starts, axis=0)

    def scatter_to_src(self, E: np.ndarray) -> np.ndarray:
        """Sum an (edges, ...) array into its source nodes."""
        return (self.scatter_src @ E.reshape(self.n_edges, -1)).reshape((self.n,) + E.shape[1:])
