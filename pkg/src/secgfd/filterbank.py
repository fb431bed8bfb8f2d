"""Hybrid spectral filter bank: beta-wavelet band-pass kernels plus
low-order pure high-pass kernels, applied as chains of sparse products.

Kernels are polynomials in the symmetric normalised Laplacian L and are
never materialised; each band is evaluated right to left against the input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInput, TooLarge
from .graph import shifted, spmm

MAX_BETA_ORDER = 20


@dataclass(frozen=True)
class BandPass:
    p: int
    q: int

    def __post_init__(self):
        if self.p < 0 or self.q < 0:
            raise InvalidInput("band-pass exponents must be non-negative")

    @property
    def name(self) -> str:
        return f"W{self.p}{self.q}" if max(self.p, self.q) < 10 else f"W{self.p},{self.q}"


@dataclass(frozen=True)
class HighPass:
    k: int
    epsilon: float = 0.5

    def __post_init__(self):
        if self.k < 1:
            raise InvalidInput("high-pass order must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise InvalidInput("epsilon must lie in [0, 1]")

    @property
    def name(self) -> str:
        return f"R{self.k}"


BandSpec = BandPass | HighPass


@dataclass(frozen=True)
class HybridFilterBank:
    order: int
    epsilon: float
    include_band_pass: bool = True
    include_high_pass: bool = True
    bands: tuple = field(default=())

    def __len__(self):
        return len(self.bands)

    @property
    def names(self) -> list[str]:
        return [b.name for b in self.bands]


def beta_norm(p: int, q: int) -> float:
    """1 / (2 B(p+1, q+1)) = (p+q+1)! / (2 p! q!), from exact integer factorials."""
    if p < 0 or q < 0:
        raise InvalidInput("exponents must be non-negative")
    if p + q > MAX_BETA_ORDER:
        raise TooLarge(f"p+q={p + q} exceeds {MAX_BETA_ORDER}")
    num = math.factorial(p + q + 1)
    den = 2 * math.factorial(p) * math.factorial(q)
    return num / den


def band_response(spec: BandSpec, lam):
    """Scalar (or elementwise) frequency response of a band at eigenvalue ``lam``."""
    lam = np.asarray(lam, dtype=np.float64)
    if isinstance(spec, BandPass):
        out = (lam / 2) ** spec.p * (1 - lam / 2) ** spec.q * beta_norm(spec.p, spec.q)
    else:
        out = (spec.epsilon - 1 + lam) ** spec.k
    return out if out.ndim else float(out)


def build_hybrid_bank(order: int, epsilon: float = 0.5, include_band: bool = True,
                      include_high: bool = True) -> HybridFilterBank:
    """Bands W(0,C) ... W(C,0) followed by R1 ... R(C-1)."""
    if order < 1:
        raise InvalidInput("order C must be >= 1")
    if not 0.0 <= epsilon <= 1.0:
        raise InvalidInput("epsilon must lie in [0, 1]")
    bands = []
    if include_band:
        bands += [BandPass(p, order - p) for p in range(order + 1)]
    if include_high:
        bands += [HighPass(k, epsilon) for k in range(1, order)]
    return HybridFilterBank(order, float(epsilon), include_band, include_high, tuple(bands))


class _NumpyOps:
    @staticmethod
    def mm(S, X):
        return spmm(S, X)

    @staticmethod
    def scale(X, c):
        return X * c


@dataclass
class BankOperators:
    """Sparse factors shared by all bands: L/2, I - L/2 and (eps-1)I + L."""

    half_lap: sp.csr_matrix
    low: sp.csr_matrix
    high: sp.csr_matrix | None

    @classmethod
    def from_laplacian(cls, lap: sp.csr_matrix, epsilon: float = 0.5):
        return cls(
            half_lap=shifted(lap, 0.5, 0.0),
            low=shifted(lap, -0.5, 1.0),
            high=shifted(lap, 1.0, epsilon - 1.0),
        )


def _check(lap, H):
    if lap.shape[0] != lap.shape[1]:
        raise InvalidInput("Laplacian must be square")
    if H.shape[0] != lap.shape[1]:
        raise InvalidInput(f"shape mismatch: {lap.shape} @ {H.shape}")


def _as_2d(H):
    H = np.asarray(H, dtype=np.float64)
    return (H[:, None], True) if H.ndim == 1 else (H, False)


def apply_band(spec: BandSpec, lap: sp.csr_matrix, H) -> np.ndarray:
    """Apply one band to ``H`` by repeated sparse products (no dense kernel)."""
    H2, squeeze = _as_2d(H)
    _check(lap, H2)
    if isinstance(spec, BandPass):
        ops = BankOperators.from_laplacian(lap)
        out = H2
        for _ in range(spec.q):
            out = spmm(ops.low, out)
        for _ in range(spec.p):
            out = spmm(ops.half_lap, out)
        out = out * beta_norm(spec.p, spec.q)
    else:
        R = shifted(lap, 1.0, spec.epsilon - 1.0)
        out = H2
        for _ in range(spec.k):
            out = spmm(R, out)
    return out[:, 0] if squeeze else out


def apply_bank(bank: HybridFilterBank, lap, H0, ops=None, backend=_NumpyOps):
    """Outputs of every band, in bank order.

    Chains of (I - L/2) and ((eps-1)I + L) products are computed once and
    reused; each band performs the same products in the same order as
    :func:`apply_band`, so the results agree bit for bit. ``backend`` supplies
    ``mm`` and ``scale`` so the same schedule can run on a gradient tape.
    """
    if backend is _NumpyOps:
        H0, squeeze = _as_2d(H0)
        _check(lap, H0)
    else:
        squeeze = False
    if not bank.bands:
        return []
    ops = ops or BankOperators.from_laplacian(lap, bank.epsilon)
    C = bank.order
    out = []
    if bank.include_band_pass:
        low_pows = [H0]
        for _ in range(C):
            low_pows.append(backend.mm(ops.low, low_pows[-1]))
        for spec in bank.bands:
            if not isinstance(spec, BandPass):
                continue
            cur = low_pows[spec.q]
            for _ in range(spec.p):
                cur = backend.mm(ops.half_lap, cur)
            out.append(backend.scale(cur, beta_norm(spec.p, spec.q)))
    if bank.include_high_pass and C > 1:
        cur = H0
        for _ in range(1, C):
            cur = backend.mm(ops.high, cur)
            out.append(cur)
    if squeeze:
        out = [o[:, 0] for o in out]
    return out


def dense_kernel(spec: BandSpec, lap) -> np.ndarray:
    """Materialised kernel matrix; diagnostics and tests only."""
    L = lap.toarray() if sp.issparse(lap) else np.asarray(lap)
    n = L.shape[0]
    eye = np.eye(n)
    if isinstance(spec, BandPass):
        return (np.linalg.matrix_power(L / 2, spec.p)
                @ np.linalg.matrix_power(eye - L / 2, spec.q)) * beta_norm(spec.p, spec.q)
    return np.linalg.matrix_power((spec.epsilon - 1) * eye + L, spec.k)
