"""Sparse assembly and Krylov solvers for the symmetric systems of the scheme.

Storage is :class:`scipy.sparse.csr_matrix`; the solvers are a plain
Jacobi-preconditioned conjugate gradient written here so that the iteration
order, stopping test and Lanczos diagnostics are fully controlled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigvalsh_tridiagonal

__all__ = [
    "SolverConfig",
    "SolverError",
    "SolveInfo",
    "assemble",
    "symmetry_defect",
    "pcg",
    "solve_spd",
    "solve_zero_mean",
]


class SolverError(RuntimeError):
    """Raised when an iterative solve fails to reach its tolerance."""


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-10
    max_iter: int = 10_000
    preconditioner: str = "diagonal"

    def __post_init__(self):
        if not (0.0 < self.tol < 1.0):
            raise ValueError(f"tolerance must lie in (0, 1), got {self.tol}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.preconditioner not in ("none", "diagonal"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass
class SolveInfo:
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True
    ritz_min: float = np.nan
    ritz_max: float = np.nan
    deflected: bool = False
    compatibility: float = 0.0
    history: list = field(default_factory=list)


def assemble(rows, cols, vals, shape) -> sp.csr_matrix:
    """Sum duplicate triplets into a CSR matrix.

    Duplicates are summed in ascending value order after sorting by
    (row, col), so the result is bit-identical for any permutation of the
    triplet stream.
    """
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    vals = np.asarray(vals, dtype=float).ravel()
    nr, nc = shape
    if not (len(rows) == len(cols) == len(vals)):
        raise ValueError("triplet arrays differ in length")
    if len(rows) == 0:
        return sp.csr_matrix((nr, nc))
    if rows.min() < 0 or rows.max() >= nr or cols.min() < 0 or cols.max() >= nc:
        raise IndexError("triplet index out of range")
    order = np.lexsort((vals, cols, rows))
    r, c, v = rows[order], cols[order], vals[order]
    key = r * nc + c
    start = np.flatnonzero(np.concatenate([[True], key[1:] != key[:-1]]))
    summed = np.add.reduceat(v, start)
    mat = sp.csr_matrix((summed, (r[start], c[start])), shape=(nr, nc))
    mat.sort_indices()
    return mat


def symmetry_defect(A, rng=None, probes: int = 3) -> float:
    """Relative size of ``(A - A^T)`` acting on random vectors."""
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for _ in range(probes):
        x = rng.standard_normal(A.shape[1])
        ax = A @ x
        atx = A.T @ x
        worst = max(worst, np.linalg.norm(ax - atx) / max(np.linalg.norm(ax), 1e-300))
    return float(worst)


def _as_operator(A) -> Callable[[np.ndarray], np.ndarray]:
    if callable(A) and not sp.issparse(A) and not isinstance(A, np.ndarray):
        return A
    return lambda x: A @ x


def _ritz(alphas, betas) -> tuple[float, float]:
    if not alphas:
        return np.nan, np.nan
    a = np.asarray(alphas)
    b = np.asarray(betas[: len(alphas) - 1])
    diag = 1.0 / a
    diag[1:] += b / a[:-1]
    off = np.sqrt(np.maximum(b, 0.0)) / a[:-1]
    ev = eigvalsh_tridiagonal(diag, off) if len(a) > 1 else diag
    return float(ev.min()), float(ev.max())


def pcg(A, b, config: SolverConfig = SolverConfig(), x0=None, diag=None,
        ritz: bool = False) -> tuple[np.ndarray, SolveInfo]:
    """Preconditioned conjugate gradients.

    ``A`` is a matrix or a callable computing ``A @ x``.  Convergence is
    declared on the true relative residual ``|b - A x| / |b|``.  With
    ``ritz=True`` the extreme eigenvalues of the Lanczos matrix built from the
    CG coefficients (Ritz values of the preconditioned operator) are returned.
    """
    op = _as_operator(A)
    b = np.asarray(b, dtype=float)
    n = len(b)
    info = SolveInfo()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), info
    if config.preconditioner == "diagonal":
        if diag is None:
            if callable(A) and not sp.issparse(A):
                raise ValueError("diagonal preconditioning of an operator needs diag=")
            diag = A.diagonal()
        diag = np.asarray(diag, dtype=float)
        if np.any(diag <= 0):
            raise SolverError("non-positive diagonal: matrix is not SPD")
        minv = 1.0 / diag
    else:
        minv = np.ones(n)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - op(x) if x0 is not None else b.copy()
    z = minv * r
    p = z.copy()
    rz = float(r @ z)
    alphas, betas = [], []
    it = 0
    rel = np.linalg.norm(r) / bnorm
    while it < config.max_iter:
        if rel <= config.tol:
            # guard against drift of the recursive residual
            rtrue = np.linalg.norm(b - op(x)) / bnorm
            if rtrue <= config.tol:
                rel = rtrue
                break
            r = b - op(x)
            z = minv * r
            p = z.copy()
            rz = float(r @ z)
        ap = op(p)
        pap = float(p @ ap)
        if pap <= 0.0:
            info.converged = False
            info.iterations, info.residual = it, rel
            info.ritz_min = -np.inf
            raise SolverError(f"CG breakdown: p^T A p = {pap:.3e} (matrix not SPD)")
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        z = minv * r
        rz_new = float(r @ z)
        beta = rz_new / rz
        alphas.append(alpha)
        betas.append(beta)
        p = z + beta * p
        rz = rz_new
        it += 1
        rel = np.linalg.norm(r) / bnorm
    else:
        rel = np.linalg.norm(b - op(x)) / bnorm
    info.iterations = it
    info.residual = float(rel)
    info.converged = rel <= config.tol
    if ritz:
        info.ritz_min, info.ritz_max = _ritz(alphas, betas)
    return x, info


def solve_spd(A, b, config: SolverConfig = SolverConfig(), x0=None, diag=None,
              return_info: bool = False, ritz: bool = False):
    """Solve ``A x = b`` for SPD ``A``; raise :class:`SolverError` on failure."""
    x, info = pcg(A, b, config, x0=x0, diag=diag, ritz=ritz)
    if not info.converged:
        raise SolverError(
            f"CG did not converge: relative residual {info.residual:.3e} after "
            f"{info.iterations} iterations (tol {config.tol:.1e})"
        )
    return (x, info) if return_info else x


def solve_zero_mean(A, b, m, config: SolverConfig = SolverConfig(), kernel=None,
                    compat_tol: float | None = None, diag=None,
                    return_info: bool = False, ritz: bool = False):
    """Solve the singular system ``A x = b`` subject to ``m . x = 0``.

    ``A`` is symmetric positive semi-definite with one-dimensional kernel
    spanned by ``kernel`` (default: the constant vector).  If ``b`` is not
    orthogonal to the kernel it is deflected by a multiple of ``m`` and the
    returned info is flagged.  The constraint is imposed through the
    rank-one augmentation ``(A + gamma m m^T) x = b``.
    """
    b = np.asarray(b, dtype=float)
    m = np.asarray(m, dtype=float)
    n = len(b)
    one = np.ones(n) if kernel is None else np.asarray(kernel, dtype=float)
    km = float(one @ m)
    if km == 0.0:
        raise ValueError("mean functional vanishes on the kernel")
    compat = float(one @ b)
    scale = float(np.abs(one) @ np.abs(b))
    tol = 10 * config.tol if compat_tol is None else compat_tol
    deflected = abs(compat) > tol * max(scale, 1e-300)
    b = b - (compat / km) * m
    if diag is None:
        if callable(A) and not sp.issparse(A):
            raise ValueError("operator input needs diag=")
        diag = A.diagonal()
    diag = np.asarray(diag, dtype=float)
    gamma = float(np.mean(np.abs(diag))) / float(m @ m)
    op = _as_operator(A)

    def aug(x):
        return op(x) + gamma * m * float(m @ x)

    x, info = pcg(aug, b, config, diag=diag + gamma * m * m, ritz=ritz)
    if not info.converged:
        raise SolverError(
            f"CG did not converge: relative residual {info.residual:.3e} after "
            f"{info.iterations} iterations"
        )
    # remove the remaining mean exactly; A annihilates the kernel
    x = x - (float(m @ x) / km) * one
    info.deflected = bool(deflected)
    info.compatibility = compat
    bn = np.linalg.norm(b)
    info.residual = float(np.linalg.norm(op(x) - b) / bn) if bn > 0 else 0.0
    return (x, info) if return_info else x
