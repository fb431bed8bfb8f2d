"""Sparse graph container, Laplacians and spectral / heterophily diagnostics.

Sparse matrices are ``scipy.sparse.csr_matrix`` objects in canonical form
(sorted column indices, no duplicates). Products against dense matrices go
through :func:`spmm`, which accumulates every row in ascending column order.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import EmptyDenominator, InvalidInput, TooLarge

UNKNOWN = -1
DEFAULT_SPECTRUM_CAP = 2000


class LaplacianKind(str, Enum):
    UNNORMALIZED = "unnormalized"
    SYM_NORMALIZED = "sym_normalized"


@dataclass(frozen=True, eq=False)
class SparseGraph:
    """Undirected, unweighted graph in CSR form.

    Every edge is stored in both directions, column indices within a row
    are strictly increasing and no self-loop is stored.
    """

    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray

    def __post_init__(self):
        self.row_offsets.setflags(write=False)
        self.col_indices.setflags(write=False)

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return len(self.col_indices) // 2

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def neighbors(self, v: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[v]:self.row_offsets[v + 1]]

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.col_indices))
        return sp.csr_matrix(
            (data, self.col_indices.copy(), self.row_offsets.copy()),
            shape=(self.num_nodes, self.num_nodes),
        )

    def edge_array(self) -> np.ndarray:
        """Undirected edges as an (m, 2) array with src < dst, sorted."""
        src = np.repeat(np.arange(self.num_nodes), self.degrees)
        keep = src < self.col_indices
        return np.stack([src[keep], self.col_indices[keep]], axis=1)

    def __eq__(self, other):
        if not isinstance(other, SparseGraph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
        )

    __hash__ = None


def build_graph(edges, num_nodes: int) -> SparseGraph:
    """Canonical symmetric CSR graph from an iterable of (u, v) pairs.

    Duplicate pairs collapse to one edge and self-loops are dropped.
    """
    num_nodes = int(num_nodes)
    if num_nodes < 0:
        raise InvalidInput("num_nodes must be non-negative")
    arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges,
                     dtype=np.int64)
    if arr.size == 0:
        arr = arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidInput("edges must be pairs of node ids")
    if arr.size and (arr.min() < 0 or arr.max() >= num_nodes):
        raise InvalidInput(f"node id out of range [0, {num_nodes})")
    arr = arr[arr[:, 0] != arr[:, 1]]
    both = np.concatenate([arr, arr[:, ::-1]], axis=0)
    # lexicographic unique over (row, col) gives sorted, deduplicated CSR order
    keys = np.unique(both[:, 0] * num_nodes + both[:, 1]) if len(both) else np.empty(0, np.int64)
    rows = keys // max(num_nodes, 1)
    cols = keys % max(num_nodes, 1)
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=num_nodes), out=offsets[1:])
    return SparseGraph(num_nodes, offsets, cols.astype(np.int64))


def graph_from_adjacency(adj) -> SparseGraph:
    """Graph from any (dense or sparse) square adjacency; nonzeros become edges."""
    coo = sp.coo_matrix(adj)
    if coo.shape[0] != coo.shape[1]:
        raise InvalidInput("adjacency must be square")
    mask = coo.data != 0
    return build_graph(np.stack([coo.row[mask], coo.col[mask]], axis=1), coo.shape[0])


def remove_edges(g: SparseGraph, drop: np.ndarray) -> SparseGraph:
    """Copy of ``g`` without the undirected edges listed in ``drop`` (k, 2)."""
    drop = np.asarray(drop, dtype=np.int64).reshape(-1, 2)
    if len(drop) == 0:
        return g
    n = g.num_nodes
    dropped = np.concatenate([drop[:, 0] * n + drop[:, 1], drop[:, 1] * n + drop[:, 0]])
    edges = g.edge_array()
    keep = ~np.isin(edges[:, 0] * n + edges[:, 1], dropped)
    return build_graph(edges[keep], n)


def _inv_sqrt_degrees(g: SparseGraph) -> np.ndarray:
    deg = g.degrees.astype(np.float64)
    out = np.zeros_like(deg)
    nz = deg > 0
    out[nz] = 1.0 / np.sqrt(deg[nz])
    return out


def normalized_adjacency(g: SparseGraph) -> sp.csr_matrix:
    """D^{-1/2} A D^{-1/2}, with zero rows for isolated nodes."""
    s = _inv_sqrt_degrees(g)
    src = np.repeat(np.arange(g.num_nodes), g.degrees)
    data = s[src] * s[g.col_indices]
    return sp.csr_matrix((data, g.col_indices.copy(), g.row_offsets.copy()),
                         shape=(g.num_nodes, g.num_nodes))


def row_normalized_adjacency(g: SparseGraph) -> sp.csr_matrix:
    """D^{-1} A (neighbour mean); isolated rows stay zero."""
    deg = g.degrees.astype(np.float64)
    inv = np.zeros_like(deg)
    inv[deg > 0] = 1.0 / deg[deg > 0]
    src = np.repeat(np.arange(g.num_nodes), g.degrees)
    return sp.csr_matrix((inv[src], g.col_indices.copy(), g.row_offsets.copy()),
                         shape=(g.num_nodes, g.num_nodes))


def laplacian(g: SparseGraph, kind=LaplacianKind.SYM_NORMALIZED) -> sp.csr_matrix:
    """Sparse graph Laplacian including its diagonal.

    ``UNNORMALIZED`` is D - A. ``SYM_NORMALIZED`` is I - D^{-1/2} A D^{-1/2};
    an isolated node keeps a diagonal of 1 so the spectrum stays in [0, 2].
    """
    kind = LaplacianKind(kind)
    n = g.num_nodes
    if kind is LaplacianKind.UNNORMALIZED:
        off = -g.adjacency()
        diag = g.degrees.astype(np.float64)
    else:
        off = -normalized_adjacency(g)
        diag = np.ones(n)
    lap = (off + sp.diags(diag, format="csr")).tocsr()
    lap.sum_duplicates()
    lap.sort_indices()
    return lap


def shifted(mat: sp.csr_matrix, scale: float = 1.0, shift: float = 0.0) -> sp.csr_matrix:
    """scale * mat + shift * I as a canonical CSR matrix (explicit diagonal)."""
    n = mat.shape[0]
    out = (scale * mat + sp.diags(np.full(n, float(shift)), format="csr")).tocsr()
    out.sum_duplicates()
    out.sort_indices()
    return out


def spmm(S: sp.spmatrix, M: np.ndarray) -> np.ndarray:
    """Sparse-times-dense product, accumulated per row in ascending column order."""
    M = np.asarray(M, dtype=np.float64)
    if S.shape[1] != M.shape[0]:
        raise InvalidInput(f"shape mismatch: {S.shape} @ {M.shape}")
    if not sp.isspmatrix_csr(S):
        S = sp.csr_matrix(S)
    if not S.has_sorted_indices:
        S = S.sorted_indices()
    return S @ M


def heterophily(g: SparseGraph, y) -> tuple[np.ndarray, float]:
    """Per-node and graph-level heterophily over labelled endpoints.

    Returns ``(node_values, graph_value)``. Node values are NaN where the node
    is unlabelled or has no labelled neighbour. Raises EmptyDenominator when no
    edge has two labelled endpoints.
    """
    y = np.asarray(y)
    if len(y) != g.num_nodes:
        raise InvalidInput("label vector length must equal num_nodes")
    src = np.repeat(np.arange(g.num_nodes), g.degrees)
    dst = g.col_indices
    known = (y[src] != UNKNOWN) & (y[dst] != UNKNOWN)
    differ = known & (y[src] != y[dst])
    n_known = np.bincount(src[known], minlength=g.num_nodes)
    n_diff = np.bincount(src[differ], minlength=g.num_nodes)
    node = np.full(g.num_nodes, np.nan)
    ok = n_known > 0
    node[ok] = n_diff[ok] / n_known[ok]
    total = known.sum()
    if total == 0:
        raise EmptyDenominator("no edge with two labelled endpoints")
    return node, float(differ.sum() / total)


def graph_heterophily(g: SparseGraph, y) -> float:
    return heterophily(g, y)[1]


def class_heterophily(g: SparseGraph, y, cls: int) -> float:
    """Share of labelled edge endpoints at class ``cls`` nodes that point to another class."""
    y = np.asarray(y)
    src = np.repeat(np.arange(g.num_nodes), g.degrees)
    dst = g.col_indices
    sel = (y[src] == cls) & (y[dst] != UNKNOWN)
    if not sel.any():
        raise EmptyDenominator(f"no labelled edges at class {cls}")
    return float(np.mean(y[dst][sel] != cls))


def _check_signal(g: SparseGraph, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if len(x) != g.num_nodes:
        raise InvalidInput("signal length must equal num_nodes")
    if not np.any(x):
        raise InvalidInput("signal must not be all zero")
    return x


def rayleigh_quotient(g: SparseGraph, x, kind=LaplacianKind.UNNORMALIZED) -> float:
    """x^T L x / x^T x via the sparse quadratic form."""
    x = _check_signal(g, x)
    lx = spmm(laplacian(g, kind), x[:, None])[:, 0]
    return float(x @ lx / (x @ x))


def rayleigh_edge_sum(g: SparseGraph, x, kind=LaplacianKind.UNNORMALIZED) -> float:
    """Rayleigh quotient as a sum of squared differences over ordered edge pairs.

    Each undirected edge is visited twice, hence the 2 in the denominator.
    For the normalised Laplacian the endpoints are degree-scaled and isolated
    nodes contribute their own energy.
    """
    x = _check_signal(g, x)
    src = np.repeat(np.arange(g.num_nodes), g.degrees)
    dst = g.col_indices
    denom = 2.0 * (x @ x)
    if LaplacianKind(kind) is LaplacianKind.UNNORMALIZED:
        return float(np.sum((x[src] - x[dst]) ** 2) / denom)
    s = _inv_sqrt_degrees(g)
    z = x * s
    iso = g.degrees == 0
    return float((np.sum((z[src] - z[dst]) ** 2) + 2.0 * np.sum(x[iso] ** 2)) / denom)


def dense_spectrum(g: SparseGraph, kind=LaplacianKind.SYM_NORMALIZED,
                   cap: int = DEFAULT_SPECTRUM_CAP) -> tuple[np.ndarray, np.ndarray]:
    """Ascending eigenvalues and orthonormal eigenvectors (columns) of L."""
    if g.num_nodes > cap:
        raise TooLarge(f"{g.num_nodes} nodes exceeds dense spectrum cap {cap}")
    lam, U = np.linalg.eigh(laplacian(g, kind).toarray())
    return lam, U


def spectral_energy_profile(g: SparseGraph, x, kind=LaplacianKind.SYM_NORMALIZED,
                            cap: int = DEFAULT_SPECTRUM_CAP):
    """Cumulative spectral energy of ``x``.

    Returns ``(eigenvalues, eta)`` where ``eta[k]`` is the share of the energy
    of ``U^T x`` carried by the first k+1 eigenvalues.
    """
    x = _check_signal(g, x)
    lam, U = dense_spectrum(g, kind, cap)
    energy = (U.T @ x) ** 2
    eta = np.cumsum(energy) / energy.sum()
    eta = np.maximum.accumulate(np.minimum(eta, 1.0))
    eta[-1] = 1.0
    return lam, eta


def rayleigh_from_profile(lam: np.ndarray, eta: np.ndarray) -> float:
    """Rayleigh quotient recovered from an energy curve by summation by parts:
    lambda_max minus the area under the step curve ``eta``."""
    lam = np.asarray(lam, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    return float(lam[-1] - np.sum(np.diff(lam) * eta[:-1]))
