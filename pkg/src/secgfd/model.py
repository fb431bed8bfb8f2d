"""Fraud detector: hybrid filter branch, local environment branch, objective.

The environment branch pools over the same hidden matrix ``H0 = MLP(X)`` the
filter branch consumes: KNN neighbour *sets* come from feature cosine
similarity, but both the masked multi-hop neighbour view and the KNN view
average rows of ``H0``, so the constraint loss trains the shared MLP.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from . import nn
from .errors import InvalidInput
from .filterbank import BankOperators, apply_bank, build_hybrid_bank
from .graph import (
    LaplacianKind,
    SparseGraph,
    laplacian,
    normalized_adjacency,
    row_normalized_adjacency,
)

AGG_MODES = ("concat", "sum")
DELTA_MODES = ("inverse_frequency", "paper_literal")
VARIANTS = ("hybrid", "lowpass", "highpass")


@dataclass(frozen=True)
class ModelConfig:
    C: int = 2
    epsilon: float = 0.5
    hidden_dim: int = 64
    agg: str = "concat"
    alpha: float = 0.8
    knn_k: int = 5
    sgc_hops: int = 2
    delta_mode: str = "inverse_frequency"
    use_band: bool = True
    use_high: bool = True
    use_env: bool = True
    variant: str = "hybrid"

    def __post_init__(self):
        if self.C < 1:
            raise InvalidInput("C must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise InvalidInput("epsilon must lie in [0, 1]")
        if self.hidden_dim < 1:
            raise InvalidInput("hidden_dim must be >= 1")
        if self.agg not in AGG_MODES:
            raise InvalidInput(f"agg must be one of {AGG_MODES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidInput("alpha must lie in [0, 1]")
        if self.knn_k < 1:
            raise InvalidInput("knn_k must be >= 1")
        if self.sgc_hops not in (1, 2, 3):
            raise InvalidInput("sgc_hops must be 1, 2 or 3")
        if self.delta_mode not in DELTA_MODES:
            raise InvalidInput(f"delta_mode must be one of {DELTA_MODES}")
        if self.variant not in VARIANTS:
            raise InvalidInput(f"variant must be one of {VARIANTS}")
        if self.variant == "hybrid" and not (self.use_band or self.use_high and self.C > 1):
            raise InvalidInput("filter bank is empty under these ablation flags")

    @property
    def env_active(self) -> bool:
        return self.use_env and self.alpha < 1.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInput(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------ KNN view


class KnnIndex(NamedTuple):
    neighbors: np.ndarray  # (n, k) node ids, most similar first
    similarity: np.ndarray  # (n, k) cosine similarities


def build_knn(X, k: int, chunk: int = 1024) -> KnnIndex:
    """Exact top-k cosine neighbours, ties broken by ascending node id.

    A zero feature row has similarity -1 to every other node.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise InvalidInput("KNN needs at least two nodes")
    if k < 1:
        raise InvalidInput("k must be >= 1")
    k = min(k, n - 1)
    norms = np.linalg.norm(X, axis=1)
    zero = norms == 0
    Xn = np.where(zero[:, None], 0.0, X / np.where(zero, 1.0, norms)[:, None])
    nbrs = np.empty((n, k), dtype=np.int64)
    sims = np.empty((n, k))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        S = Xn[start:stop] @ Xn.T
        S[zero[start:stop], :] = -1.0
        S[:, zero] = -1.0
        rows = np.arange(stop - start)
        S[rows, rows + start] = -np.inf
        # stable sort on -sim keeps ascending ids among equal similarities
        order = np.argsort(-S, axis=1, kind="stable")[:, :k]
        nbrs[start:stop] = order
        sims[start:stop] = np.take_along_axis(S, order, axis=1)
    return KnnIndex(nbrs, sims)


def knn_pool_matrix(knn: KnnIndex, n: int) -> sp.csr_matrix:
    k = knn.neighbors.shape[1]
    rows = np.repeat(np.arange(n), k)
    cols = knn.neighbors.reshape(-1)
    M = sp.csr_matrix((np.full(n * k, 1.0 / k), (rows, cols)), shape=(n, n))
    M.sort_indices()
    return M


def knn_pool(H0, knn: KnnIndex) -> np.ndarray:
    """Row t is the mean of the rows of ``H0`` indexed by t's KNN list."""
    H0 = np.asarray(H0, dtype=np.float64)
    return H0[knn.neighbors].mean(axis=1)


# --------------------------------------------------------- masked SGC view


def _diag_of_powers(P: sp.csr_matrix, hops: int, chunk: int = 2048) -> list[np.ndarray]:
    """diag(P^l) for l = 1..hops, computed a block of rows at a time."""
    n = P.shape[0]
    PT = P.T.tocsr()
    out = [np.zeros(n) for _ in range(hops)]
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        block = sp.identity(n, format="csr")[start:stop]
        for l in range(1, hops + 1):
            # (P^l)_tt = sum_u (P^{l-1})_tu P_ut
            out[l - 1][start:stop] = np.asarray(block.multiply(PT[start:stop]).sum(axis=1)).ravel()
            if l < hops:
                block = (block @ P).tocsr()
    return out


class SgcOperator:
    """Target-masked multi-hop neighbour mean.

    For target t, propagating ``H0`` with row t zeroed through D^{-1}A for l
    hops and reading row t equals ``(P^l H0)_t - (P^l)_tt * H0_t``; the hop
    outputs are averaged.
    """

    def __init__(self, g: SparseGraph, hops: int = 2):
        if hops < 1:
            raise InvalidInput("hops must be >= 1")
        self.hops = hops
        self.P = row_normalized_adjacency(g)
        self.self_weight = np.mean(_diag_of_powers(self.P, hops), axis=0)

    def apply(self, H0):
        H0 = np.asarray(H0, dtype=np.float64)
        cur = H0
        acc = np.zeros_like(H0)
        for _ in range(self.hops):
            cur = self.P @ cur
            acc = acc + cur
        return acc / self.hops - self.self_weight[:, None] * H0

    def on_tape(self, tape: nn.Tape, H0):
        cur = H0
        hops = []
        for _ in range(self.hops):
            cur = tape.spmm(self.P, cur)
            hops.append(cur)
        own = tape.scale(H0, -self.self_weight)
        return tape.lincomb([1.0 / self.hops] * self.hops + [1.0], hops + [own])


def sgc_neighbor_repr(g: SparseGraph, H0, hops: int = 2) -> np.ndarray:
    return SgcOperator(g, hops).apply(H0)


# ------------------------------------------------------------------- losses


def class_weight(y, train_mask, mode: str = "inverse_frequency") -> float:
    y = np.asarray(y)
    mask = np.asarray(train_mask, dtype=bool)
    n_anom = int(np.sum(mask & (y == 1)))
    n_norm = int(np.sum(mask & (y == 0)))
    if n_anom == 0 or n_norm == 0:
        raise InvalidInput("training set must contain both classes")
    if mode == "inverse_frequency":
        return n_norm / n_anom
    if mode == "paper_literal":
        return n_anom / n_norm
    raise InvalidInput(f"unknown delta mode {mode!r}")


def hybrid_loss(logits, y, train_mask, delta_mode="inverse_frequency", delta=None) -> float:
    """Class-weighted binary cross-entropy averaged over the training nodes."""
    if delta is None:
        delta = class_weight(y, train_mask, delta_mode)
    return nn.weighted_bce_with_logits(logits, y, train_mask, delta)[0]


def _cosine_rows(A, B):
    t = nn.Tape()
    return t.row_cosine(np.asarray(A, float), np.asarray(B, float)).value


def env_loss_from_similarities(sims, y, train_mask) -> float:
    return nn.env_contrast_loss(sims, y, train_mask)[0]


def env_loss(H_neigh, H_knn, y, train_mask) -> float:
    """-log of mean e^cos over normal training nodes divided by the anomaly mean."""
    return env_loss_from_similarities(_cosine_rows(H_neigh, H_knn), y, train_mask)


def total_loss(hybrid, env, alpha: float, use_env: bool = True):
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInput("alpha must lie in [0, 1]")
    if not use_env:
        return hybrid
    return alpha * hybrid + (1.0 - alpha) * env


# -------------------------------------------------------------------- model


@dataclass
class SecGfdParams:
    W1: nn.Param
    b1: nn.Param
    W2: nn.Param
    b2: nn.Param

    def as_list(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def state(self):
        return {p.name: p.value.copy() for p in self.as_list()}

    @classmethod
    def from_state(cls, state):
        return cls(*(nn.Param(state[k], k) for k in ("W1", "b1", "W2", "b2")))


def head_input_dim(cfg: ModelConfig) -> int:
    if cfg.variant != "hybrid" or cfg.agg == "sum":
        return cfg.hidden_dim
    n_bands = (cfg.C + 1 if cfg.use_band else 0) + (cfg.C - 1 if cfg.use_high else 0)
    return n_bands * cfg.hidden_dim


def init_params(cfg: ModelConfig, in_dim: int, rng: np.random.Generator) -> SecGfdParams:
    h = cfg.hidden_dim
    head = head_input_dim(cfg)
    return SecGfdParams(
        nn.Param(nn.glorot_uniform(rng, in_dim, h), "W1"),
        nn.Param(np.zeros(h), "b1"),
        nn.Param(nn.glorot_uniform(rng, head, 1), "W2"),
        nn.Param(np.zeros(1), "b2"),
    )


class GraphContext:
    """Everything derived from the graph and raw features alone; built once."""

    def __init__(self, g: SparseGraph, X, cfg: ModelConfig):
        self.graph = g
        self.cfg = cfg
        self.lap = laplacian(g, LaplacianKind.SYM_NORMALIZED)
        self.bank = build_hybrid_bank(cfg.C, cfg.epsilon, cfg.use_band, cfg.use_high)
        self.bank_ops = BankOperators.from_laplacian(self.lap, cfg.epsilon)
        self.norm_adj = normalized_adjacency(g) if cfg.variant == "lowpass" else None
        self.knn = None
        self.knn_matrix = None
        self.sgc = None
        if cfg.env_active:
            self.knn = build_knn(X, cfg.knn_k)
            self.knn_matrix = knn_pool_matrix(self.knn, g.num_nodes)
            self.sgc = SgcOperator(g, cfg.sgc_hops)


class _TapeOps:
    def __init__(self, tape):
        self.tape = tape

    def mm(self, S, X):
        return self.tape.spmm(S, X)

    def scale(self, X, c):
        return self.tape.scale(X, c)


class Forward(NamedTuple):
    tape: nn.Tape
    H0: nn.Tensor
    bands: list
    H: nn.Tensor
    logits: nn.Tensor
    probs: np.ndarray


def forward(params: SecGfdParams, ctx: GraphContext, X, tape: nn.Tape | None = None) -> Forward:
    """H0 = relu(X W1 + b1); filter outputs; aggregation; one-logit head."""
    cfg = ctx.cfg
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != ctx.graph.num_nodes:
        raise InvalidInput("feature rows must equal num_nodes")
    tape = tape or nn.Tape()
    H0 = tape.relu(tape.affine(X, params.W1, params.b1))
    if cfg.variant == "lowpass":
        bands = [tape.spmm(ctx.norm_adj, tape.spmm(ctx.norm_adj, H0))]
    elif cfg.variant == "highpass":
        bands = [tape.spmm(ctx.lap, H0)]
    else:
        bands = apply_bank(ctx.bank, ctx.lap, H0, ops=ctx.bank_ops, backend=_TapeOps(tape))
    if len(bands) == 1:
        H = bands[0]
    elif cfg.agg == "concat":
        H = tape.concat(bands)
    else:
        H = tape.add(*bands)
    logits = tape.affine(H, params.W2, params.b2)
    return Forward(tape, H0, bands, H, logits, nn.sigmoid(logits.value[:, 0]))


class LossParts(NamedTuple):
    total: nn.Tensor
    hybrid: float
    env: float


def objective(params: SecGfdParams, ctx: GraphContext, X, y, train_mask,
              delta: float | None = None) -> tuple[Forward, LossParts]:
    """Forward pass plus the weighted objective, all on one tape."""
    cfg = ctx.cfg
    fw = forward(params, ctx, X)
    tape = fw.tape
    if delta is None:
        delta = class_weight(y, train_mask, cfg.delta_mode)
    l_hyb = tape.weighted_bce(fw.logits, y, train_mask, delta)
    if not cfg.env_active:
        return fw, LossParts(l_hyb, float(l_hyb.value), float("nan"))
    h_neigh = ctx.sgc.on_tape(tape, fw.H0)
    h_knn = tape.spmm(ctx.knn_matrix, fw.H0)
    sims = tape.row_cosine(h_neigh, h_knn)
    l_env = tape.env_contrast(sims, y, train_mask)
    total = tape.lincomb([cfg.alpha, 1.0 - cfg.alpha], [l_hyb, l_env])
    return fw, LossParts(total, float(l_hyb.value), float(l_env.value))
