"""Sparse SPD solves: cached direct factorizations, a CG fallback, dense inverses."""
from __future__ import annotations

import hashlib
import threading
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, NumericalError

try:  # optional: sparse Cholesky from SuiteSparse
    from sksparse.cholmod import CholmodError, cholesky as _cholmod_cholesky
except ImportError:  # pragma: no cover - depends on the environment
    _cholmod_cholesky = None

DENSE_INVERSE_LIMIT = 20_000
BACKENDS = ("auto", "cholmod", "superlu")


def available_backend(name: str = "auto") -> str:
    if name not in BACKENDS:
        raise ConfigError(f"unknown factorization backend {name!r}")
    if name == "auto":
        return "cholmod" if _cholmod_cholesky is not None else "superlu"
    if name == "cholmod" and _cholmod_cholesky is None:
        raise ConfigError("backend 'cholmod' needs scikit-sparse")
    return name


def combine(M: sp.spmatrix, S: sp.spmatrix, tau: float) -> sp.csr_matrix:
    """System matrix ``M + tau**2/4 * S`` of one implicit step."""
    if M.shape != S.shape:
        raise ConfigError(f"dimension mismatch {M.shape} vs {S.shape}")
    K = (M + (0.25 * tau * tau) * S).tocsr()
    K.sort_indices()
    return K


def fingerprint(*mats: sp.spmatrix) -> str:
    h = hashlib.sha256()
    for A in mats:
        A = A.tocsr()
        h.update(np.asarray(A.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(A.indptr, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(A.indices, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(A.data, dtype=np.float64).tobytes())
    return h.hexdigest()


class Factorization:
    """Sparse factorization of an SPD matrix.

    The ``cholmod`` backend is a supernodal Cholesky factorization and fails
    on matrices that are not positive definite. The ``superlu`` backend runs
    LU in symmetric mode: with a symmetric permutation and no pivoting the
    diagonal of ``U`` is the ``D`` of an ``LDL^T`` factorization, so
    positivity of that diagonal certifies positive definiteness.
    """

    def __init__(self, K: sp.spmatrix, key: Optional[str] = None, backend: str = "auto"):
        K = sp.csc_matrix(K, dtype=float)
        if K.shape[0] != K.shape[1]:
            raise ConfigError("matrix must be square")
        self.shape = K.shape
        self.fingerprint = key or fingerprint(K)
        self.backend = available_backend(backend)
        self.n_solves = 0
        if self.backend == "cholmod":
            try:
                self._chol = _cholmod_cholesky(K, mode="supernodal")
            except CholmodError as exc:
                raise NumericalError(f"Cholesky factorization failed: {exc}") from exc
            self._solve = self._chol.solve_A
            return
        try:
            self._lu = spla.splu(
                K,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            raise NumericalError(f"factorization failed: {exc}") from exc
        if not np.array_equal(self._lu.perm_r, self._lu.perm_c):
            raise NumericalError("pivoting occurred; matrix is not SPD")
        pivots = self._lu.U.diagonal()
        if not np.all(pivots > 0):
            raise NumericalError("non-positive pivot; matrix is not SPD")
        self._solve = self._lu.solve

    @property
    def n(self) -> int:
        return self.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        self.n_solves += 1
        return self._solve(np.asarray(b, dtype=float))


class FactorizationCache:
    """Reuses factorizations of bit-identical matrices."""

    def __init__(self, backend: str = "auto"):
        self.backend = available_backend(backend)
        self._store: dict[str, Factorization] = {}
        self._lock = threading.Lock()
        self.factorizations = 0
        self.hits = 0

    def __len__(self) -> int:
        return len(self._store)

    def get(self, K: sp.spmatrix) -> Factorization:
        key = fingerprint(K)
        with self._lock:
            if key in self._store:
                self.hits += 1
                return self._store[key]
        F = Factorization(K, key, self.backend)
        with self._lock:
            self._store.setdefault(key, F)
            self.factorizations += 1
            return self._store[key]


def factorize(K: sp.spmatrix, cache: Optional[FactorizationCache] = None, backend: str = "auto") -> Factorization:
    if cache is not None:
        return cache.get(K)
    return Factorization(K, backend=backend)


class CGSolver:
    """Drop-in for :class:`Factorization` backed by conjugate gradients."""

    def __init__(self, K: sp.spmatrix, tol: float = 1e-13):
        self.K = sp.csr_matrix(K)
        self.tol = tol
        self.shape = self.K.shape
        self.n_solves = 0

    @property
    def n(self) -> int:
        return self.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        self.n_solves += 1
        b = np.asarray(b, dtype=float)
        if b.ndim == 1:
            return cg_solve(self.K, b, self.tol)
        return np.column_stack([cg_solve(self.K, b[:, j], self.tol) for j in range(b.shape[1])])


def cg_solve(K: sp.spmatrix, b: np.ndarray, tol: float = 1e-13, x0=None) -> np.ndarray:
    """Unpreconditioned CG to relative residual ``tol``; capped at ``10 n`` iterations."""
    b = np.asarray(b, dtype=float)
    n = b.size
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        x, info = spla.cg(K, b, x0=x0, rtol=tol, atol=0.0, maxiter=10 * n)
    if info != 0:
        raise NumericalError(f"CG did not converge within {10 * n} iterations")
    if not np.all(np.isfinite(x)):
        raise NumericalError("CG broke down; matrix is not SPD")
    return x


def cg_iterations(K: sp.spmatrix, b: np.ndarray, tol: float = 1e-13) -> int:
    count = [0]

    def cb(_):
        count[0] += 1

    spla.cg(K, b, rtol=tol, atol=0.0, maxiter=10 * b.size, callback=cb)
    return count[0]


def dense_inverse(K: sp.spmatrix, limit: int = DENSE_INVERSE_LIMIT) -> np.ndarray:
    """Full inverse by solving against all unit vectors."""
    n = K.shape[0]
    if n > limit:
        raise ConfigError(
            f"dense inverse of a {n}x{n} matrix refused (limit {limit}); "
            "use analysis.decay_profile for large meshes"
        )
    F = Factorization(K)
    return F.solve(np.eye(n))


def dump_coo(K: sp.spmatrix, path) -> None:
    """Write ``row col value`` lines, one per stored entry."""
    C = sp.coo_matrix(K)
    with open(path, "w") as fh:
        fh.write(f"% {C.shape[0]} {C.shape[1]} {C.nnz}\n")
        for i, j, v in zip(C.row, C.col, C.data):
            fh.write(f"{i} {j} {float(v)!r}\n")
