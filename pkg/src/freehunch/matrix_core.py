"""Symmetric matrices stored as diagonal plus signed low-rank factors.

A :class:`LowRankDiagMatrix` represents ``Diag(d) + U U^T - V V^T`` with plain
(non-conjugate) transposes. Factors may be complex: inverting the structure
needs square roots of small inner matrices that are not always positive
definite, but the imaginary parts cancel in the represented matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
import scipy.linalg

DEFAULT_RANK_CAP = 64
DENSE_BUDGET = 4096
IMAG_RTOL = 1e-8
INNER_COND_LIMIT = 1e13


class MatrixCoreError(Exception):
    pass


class ContractViolation(MatrixCoreError, ValueError):
    """Shapes or arguments do not match the operation's contract."""


class NumericalRankError(MatrixCoreError):
    """An inner k x k system is singular to working precision."""


class DomainError(MatrixCoreError):
    """The represented matrix is not positive definite."""


class CapacityError(MatrixCoreError):
    """Appending a column would exceed the configured rank cap."""


class RepresentationCorruption(MatrixCoreError):
    """Imaginary parts of the represented matrix failed to cancel."""


@dataclass(frozen=True)
class DenseSymMatrix:
    entries: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ContractViolation(f"expected a square matrix, got shape {a.shape}")
        scale = np.max(np.abs(a)) if a.size else 0.0
        if np.max(np.abs(a - a.T), initial=0.0) > 1e-12 * max(scale, 1e-300):
            raise ContractViolation("matrix is not symmetric")
        a = 0.5 * (a + a.T)
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def identity(cls, n: int, scale: float = 1.0) -> "DenseSymMatrix":
        return cls(scale * np.eye(n))


@dataclass(frozen=True)
class LowRankDiagMatrix:
    diag: np.ndarray
    pos_factors: np.ndarray
    neg_factors: np.ndarray
    rank_cap: int = DEFAULT_RANK_CAP

    def __post_init__(self):
        d = np.asarray(self.diag)
        if d.ndim != 1:
            raise ContractViolation("diag must be a vector")
        n = d.shape[0]
        u = _as_factor(self.pos_factors, n)
        v = _as_factor(self.neg_factors, n)
        if u.shape[1] > self.rank_cap or v.shape[1] > self.rank_cap:
            raise CapacityError(
                f"ranks ({u.shape[1]}, {v.shape[1]}) exceed cap {self.rank_cap}"
            )
        for arr in (d, u, v):
            arr.setflags(write=False)
        object.__setattr__(self, "diag", d)
        object.__setattr__(self, "pos_factors", u)
        object.__setattr__(self, "neg_factors", v)

    @property
    def dim(self) -> int:
        return self.diag.shape[0]

    @property
    def ranks(self) -> tuple[int, int]:
        return self.pos_factors.shape[1], self.neg_factors.shape[1]

    @classmethod
    def identity(cls, n: int, scale: float = 1.0, rank_cap: int = DEFAULT_RANK_CAP):
        return cls(np.full(n, float(scale)), np.zeros((n, 0)), np.zeros((n, 0)), rank_cap)

    @classmethod
    def from_diagonal(cls, diag, rank_cap: int = DEFAULT_RANK_CAP):
        d = np.asarray(diag, dtype=float)
        n = d.shape[0]
        return cls(d.copy(), np.zeros((n, 0)), np.zeros((n, 0)), rank_cap)


CovarianceBackend = Union[LowRankDiagMatrix, DenseSymMatrix]


def _as_factor(f, n: int) -> np.ndarray:
    f = np.asarray(f)
    if f.ndim == 1:
        f = f[:, None]
    if f.ndim != 2 or f.shape[0] != n:
        raise ContractViolation(f"factor of shape {f.shape} does not match dimension {n}")
    return f


def _check_vector(m: CovarianceBackend, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (m.dim,):
        raise ContractViolation(f"vector of shape {v.shape} does not match dimension {m.dim}")
    return v


def apply(m: CovarianceBackend, v) -> np.ndarray:
    """Real part of ``m @ v``."""
    v = _check_vector(m, v)
    if isinstance(m, DenseSymMatrix):
        return m.entries @ v
    u, w = m.pos_factors, m.neg_factors
    out = m.diag * v + u @ (u.T @ v) - w @ (w.T @ v)
    return np.real(out)


def diagonal(m: CovarianceBackend) -> np.ndarray:
    """Real diagonal of the represented matrix without densifying."""
    if isinstance(m, DenseSymMatrix):
        return np.diag(m.entries).copy()
    u, w = m.pos_factors, m.neg_factors
    return np.real(m.diag + np.sum(u * u, axis=1) - np.sum(w * w, axis=1))


def matvec(m: CovarianceBackend):
    """Bind ``m`` into a one-argument matrix-vector callback."""
    return lambda v: apply(m, v)


def add_scalar_diagonal(m: CovarianceBackend, c: float) -> CovarianceBackend:
    if c == 0:
        return m
    if isinstance(m, DenseSymMatrix):
        return DenseSymMatrix(m.entries + c * np.eye(m.dim))
    return LowRankDiagMatrix(m.diag + c, m.pos_factors, m.neg_factors, m.rank_cap)


def append_rank_one(m: LowRankDiagMatrix, plus, minus) -> LowRankDiagMatrix:
    plus = _check_vector(m, plus)
    minus = _check_vector(m, minus)
    if not (np.all(np.isfinite(plus)) and np.all(np.isfinite(minus))):
        raise ContractViolation("rank-one update vectors must be finite")
    k1, k2 = m.ranks
    if max(k1, k2) + 1 > m.rank_cap:
        raise CapacityError(f"rank cap {m.rank_cap} reached")
    return LowRankDiagMatrix(
        m.diag,
        np.column_stack([m.pos_factors, plus]),
        np.column_stack([m.neg_factors, minus]),
        m.rank_cap,
    )


def _dense_complex(m: LowRankDiagMatrix) -> np.ndarray:
    u, w = m.pos_factors, m.neg_factors
    return np.diag(m.diag) + u @ u.T - w @ w.T


def imaginary_residual(m: LowRankDiagMatrix) -> float:
    """Max-abs imaginary entry relative to max-abs real entry (dense, N <= budget)."""
    full = _dense_complex(m)
    re = np.max(np.abs(full.real), initial=0.0)
    im = np.max(np.abs(full.imag), initial=0.0)
    return im / re if re > 0 else im


def to_dense(m: CovarianceBackend) -> DenseSymMatrix:
    if isinstance(m, DenseSymMatrix):
        return m
    if m.dim > DENSE_BUDGET:
        raise ContractViolation(f"dimension {m.dim} exceeds dense budget {DENSE_BUDGET}")
    full = _dense_complex(m)
    re = np.max(np.abs(full.real), initial=0.0)
    im = np.max(np.abs(full.imag), initial=0.0)
    if im > IMAG_RTOL * re:
        raise RepresentationCorruption(
            f"imaginary residual {im:.3e} exceeds {IMAG_RTOL:g} x {re:.3e}"
        )
    real = full.real
    return DenseSymMatrix(0.5 * (real + real.T))


def _realified_parts(m: LowRankDiagMatrix):
    """Real N x r basis ``W`` and signs ``s`` with ``Re(UU^T - VV^T) = W diag(s) W^T``."""
    u, v = m.pos_factors, m.neg_factors
    cols = [u.real, v.real]
    signs = [np.ones(u.shape[1]), -np.ones(v.shape[1])]
    if np.iscomplexobj(u) or np.iscomplexobj(v):
        cols += [u.imag, v.imag]
        signs += [-np.ones(u.shape[1]), np.ones(v.shape[1])]
    return np.column_stack(cols), np.concatenate(signs)


def _lowrank_spectrum(m: LowRankDiagMatrix, scale: np.ndarray | None = None):
    """Eigenpairs of the (optionally row-scaled) real low-rank part, via QR."""
    w, s = _realified_parts(m)
    if scale is not None:
        w = w * scale[:, None]
    if w.shape[1] == 0:
        return np.zeros(0), np.zeros((m.dim, 0))
    q, r = np.linalg.qr(w)
    evals, evecs = np.linalg.eigh((r * s) @ r.T)
    return evals, q @ evecs


def is_positive_definite(m: CovarianceBackend) -> bool:
    if isinstance(m, DenseSymMatrix):
        return bool(np.linalg.eigvalsh(m.entries)[0] > 0)
    d = np.real(m.diag)
    if np.any(np.abs(np.imag(m.diag)) > 0) or np.any(d <= 0):
        if m.dim > DENSE_BUDGET:
            raise ContractViolation("cannot certify definiteness without a positive diagonal")
        return bool(np.linalg.eigvalsh(to_dense(m).entries)[0] > 0)
    # D^{-1/2} M D^{-1/2} = I + Z S Z^T
    evals, _ = _lowrank_spectrum(m, scale=1.0 / np.sqrt(d))
    return bool(evals.size == 0 or evals.min() > -1.0)


def _checked_inverse(k: np.ndarray, label: str) -> np.ndarray:
    if k.size == 0:
        return k
    cond = np.linalg.cond(k)
    if not np.isfinite(cond) or cond > INNER_COND_LIMIT:
        raise NumericalRankError(f"inner matrix {label} is singular (cond={cond:.3e})")
    return np.linalg.inv(k)


def _sqrt_sym(k: np.ndarray) -> np.ndarray:
    # Schur-based principal square root; a primary matrix function keeps symmetry,
    # so sqrt(K) sqrt(K)^T = K with plain transposes.
    if k.size == 0:
        return k
    root = scipy.linalg.sqrtm(k)
    return 0.5 * (root + root.T)


def invert(m: LowRankDiagMatrix, check_definite: bool = True) -> LowRankDiagMatrix:
    """Inverse in the same diagonal plus low-rank form, via two Woodbury steps.

    With ``A = D + U U^T``, ``A^{-1} = D^{-1} - V' V'^T`` where
    ``V' = D^{-1} U sqrt(K)``, ``K = (I + U^T D^{-1} U)^{-1}``; then
    ``(A - V V^T)^{-1} = A^{-1} + U' U'^T`` with ``U' = A^{-1} V sqrt(L)``,
    ``L = (I - V^T A^{-1} V)^{-1}``. Only k x k systems are solved.
    """
    if not isinstance(m, LowRankDiagMatrix):
        raise ContractViolation("invert expects a LowRankDiagMatrix")
    d = m.diag
    if np.any(d == 0):
        raise ContractViolation("diagonal entries must be nonzero")
    if check_definite and not is_positive_definite(m):
        raise DomainError("represented matrix is not positive definite")
    d_inv = 1.0 / d
    u, v = m.pos_factors, m.neg_factors
    k1, k2 = m.ranks

    if k1:
        dinv_u = d_inv[:, None] * u
        k_mat = _checked_inverse(np.eye(k1) + u.T @ dinv_u, "I + U^T D^-1 U")
        v_new = dinv_u @ _sqrt_sym(k_mat)
    else:
        v_new = np.zeros((m.dim, 0))

    if k2:
        # A^{-1} V = D^{-1} V - V' (V'^T V)
        ainv_v = d_inv[:, None] * v - v_new @ (v_new.T @ v)
        inner = np.eye(k2) - v.T @ ainv_v
        l_mat = _checked_inverse(inner, "I - V^T A^-1 V")
        u_new = ainv_v @ _sqrt_sym(l_mat)
    else:
        u_new = np.zeros((m.dim, 0))

    return LowRankDiagMatrix(d_inv, u_new, v_new, m.rank_cap)


def recompress(m: LowRankDiagMatrix, max_rank: int | None = None) -> LowRankDiagMatrix:
    """Re-express the low-rank part with real factors, keeping at most ``max_rank`` per sign.

    Lossless when the low-rank part has at most ``max_rank`` eigenvalues of each sign;
    otherwise the smallest-magnitude eigenvalues are dropped.
    """
    cap = m.rank_cap if max_rank is None else max_rank
    evals, vecs = _lowrank_spectrum(m)
    tol = 1e-14 * max(np.max(np.abs(evals), initial=0.0), 1e-300)
    pos = np.flatnonzero(evals > tol)
    neg = np.flatnonzero(evals < -tol)
    pos = pos[np.argsort(-evals[pos])][:cap]
    neg = neg[np.argsort(evals[neg])][:cap]
    u = vecs[:, pos] * np.sqrt(evals[pos])
    v = vecs[:, neg] * np.sqrt(-evals[neg])
    return LowRankDiagMatrix(np.real(m.diag).astype(float), u, v, m.rank_cap)
