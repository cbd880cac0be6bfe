"""Gradient discretisations: the common interface and quality functionals.

A gradient discretisation (GD) is a space of unknowns together with a
function reconstruction ``Pi`` and a gradient reconstruction ``grad``.  All
GDs here are piecewise polynomial on the diamond sub-mesh, so every
integral is evaluated exactly by a diamond quadrature of sufficient degree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .linalg import SolverConfig, pcg, SolverError
from .quadrature import DiamondQuadrature, diamond_quadrature

__all__ = [
    "GradientDiscretisation",
    "SpaceTimeGD",
    "SpaceTimeField",
    "InvariantError",
    "gd_norm",
    "coercivity_constant",
    "consistency_defect",
    "conformity_defect",
    "interpolate_initial",
    "interpolate_smooth",
]

DEFAULT_DEGREE = 4


class InvariantError(ValueError):
    """A structural assumption of the discretisation does not hold."""


def _tensor_values(A, n: int) -> np.ndarray:
    """Broadcast a scalar / (2,2) / (n,) / (n,2,2) tensor spec to (n,2,2)."""
    A = np.asarray(A, dtype=float)
    if A.ndim == 0:
        return np.broadcast_to(A * np.eye(2), (n, 2, 2))
    if A.shape == (2, 2):
        return np.broadcast_to(A, (n, 2, 2))
    if A.shape == (n,):
        return A[:, None, None] * np.eye(2)
    if A.shape == (n, 2, 2):
        return A
    raise ValueError(f"cannot interpret tensor of shape {A.shape} for {n} entries")


class GradientDiscretisation:
    """Base class; subclasses implement :meth:`reconstruct`.

    ``reconstruct(hf, points)`` returns sparse matrices ``(P, Gx, Gy)`` of
    shape ``(len(points), n_dofs)`` such that ``P @ v`` is ``Pi v`` and
    ``(Gx @ v, Gy @ v)`` is ``grad v`` at the points, each point being in
    diamond ``hf``.
    """

    name = "gd"
    #: polynomial degree of Pi on a diamond (0 or 1)
    pi_degree = 0
    #: polynomial degree of grad on a diamond
    grad_degree = 0

    def __init__(self, mesh):
        self.mesh = mesh
        self._quad_cache: dict[int, tuple] = {}

    # -- to be provided ------------------------------------------------------
    @property
    def n_dofs(self) -> int:  # pragma: no cover - abstract
        raise NotImplementedError

    def reconstruct(self, hf, points):  # pragma: no cover - abstract
        raise NotImplementedError

    def interpolate_initial(self, f: Callable) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def interpolate_smooth(self, f: Callable) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    # -- quadrature-backed operators ----------------------------------------
    def quadrature(self, degree: int = DEFAULT_DEGREE):
        """Cached ``(quad, P, Gx, Gy)`` at the diamond quadrature nodes."""
        if degree not in self._quad_cache:
            q = diamond_quadrature(self.mesh, degree)
            P, Gx, Gy = self.reconstruct(q.hf, q.points)
            self._quad_cache[degree] = (q, P.tocsr(), Gx.tocsr(), Gy.tocsr())
        return self._quad_cache[degree]

    @property
    def exact_degree(self) -> int:
        """Quadrature degree integrating all Gram integrands exactly."""
        return max(1, 2 * max(self.pi_degree, self.grad_degree))

    def _check(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_dofs,):
            raise ValueError(
                f"dof vector has shape {v.shape}, expected ({self.n_dofs},)"
            )
        return v

    def mass(self, weight=None, degree: int | None = None) -> sp.csr_matrix:
        """``(Pi u, Pi v)`` with an optional scalar weight at the nodes."""
        q, P, _, _ = self.quadrature(degree or self.exact_degree)
        w = q.weights if weight is None else q.weights * self._node_values(weight, q)
        return (P.T @ sp.diags(w) @ P).tocsr()

    def stiffness(self, tensor=None, degree: int | None = None) -> sp.csr_matrix:
        """``(A grad u, grad v)``.

        ``tensor`` may be ``None`` (identity), a scalar, a (2,2) array, a
        per-node array (nq,) / (nq,2,2), or a per-diamond array
        (nhf,) / (nhf,2,2).
        """
        q, _, Gx, Gy = self.quadrature(degree or self.exact_degree)
        w = q.weights
        if tensor is None:
            return (Gx.T @ sp.diags(w) @ Gx + Gy.T @ sp.diags(w) @ Gy).tocsr()
        A = self._tensor_at_nodes(tensor, q)
        out = None
        G = (Gx, Gy)
        for i in range(2):
            for j in range(2):
                c = w * A[:, i, j]
                if not np.any(c):
                    continue
                term = G[i].T @ sp.diags(c) @ G[j]
                out = term if out is None else out + term
        if out is None:
            out = sp.csr_matrix((self.n_dofs, self.n_dofs))
        return out.tocsr()

    def _tensor_at_nodes(self, tensor, q: DiamondQuadrature) -> np.ndarray:
        A = np.asarray(tensor, dtype=float)
        nhf = self.mesh.n_halffaces
        if A.ndim >= 1 and A.shape[0] == nhf and len(q) != nhf:
            A = _tensor_values(A, nhf)[q.hf]
            return A
        return _tensor_values(A, len(q))

    def _node_values(self, f, q: DiamondQuadrature) -> np.ndarray:
        if callable(f):
            return np.asarray(f(q.points), dtype=float) * np.ones(len(q))
        f = np.asarray(f, dtype=float)
        if f.ndim == 0:
            return np.full(len(q), float(f))
        if f.shape == (self.mesh.n_cells,):
            return f[self.mesh.hf_cell[q.hf]]
        if f.shape == (self.mesh.n_halffaces,):
            return f[q.hf]
        if f.shape == (len(q),):
            return f
        raise ValueError(f"cannot interpret field of shape {f.shape}")

    def load(self, f, degree: int = DEFAULT_DEGREE) -> np.ndarray:
        """``b_i = int f Pi e_i``."""
        q, P, _, _ = self.quadrature(degree)
        return P.T @ (q.weights * self._node_values(f, q))

    def grad_load(self, g: Callable, degree: int = DEFAULT_DEGREE) -> np.ndarray:
        """``b_i = int g . grad e_i`` for a vector field ``g(points) -> (n, 2)``."""
        q, _, Gx, Gy = self.quadrature(degree)
        gv = np.asarray(g(q.points), dtype=float)
        return Gx.T @ (q.weights * gv[:, 0]) + Gy.T @ (q.weights * gv[:, 1])

    def mean_functional(self) -> np.ndarray:
        """Vector ``m`` with ``m . v = int Pi v``."""
        q, P, _, _ = self.quadrature(max(1, 2 * self.pi_degree))
        return np.asarray(P.T @ q.weights).ravel()

    def func_gram(self) -> sp.csr_matrix:
        return self.mass()

    def grad_gram(self) -> sp.csr_matrix:
        return self.stiffness()

    def norm_operator(self):
        """Callable ``v -> G v`` with ``G = Gram_grad + m m^T`` and its diagonal."""
        K = self.grad_gram()
        m = self.mean_functional()

        def op(v):
            return K @ v + m * float(m @ v)

        return op, K.diagonal() + m * m

    # -- evaluation ----------------------------------------------------------
    def evaluate(self, v, points):
        """``(Pi v, grad v)`` at arbitrary points (NaN outside the domain)."""
        v = self._check(v)
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        hf = self.mesh.locate_diamond(pts)
        val = np.full(len(pts), np.nan)
        grad = np.full((len(pts), 2), np.nan)
        ok = hf >= 0
        if np.any(ok):
            P, Gx, Gy = self.reconstruct(hf[ok], pts[ok])
            val[ok] = P @ v
            grad[ok, 0] = Gx @ v
            grad[ok, 1] = Gy @ v
        return val, grad

    def evaluate_pi(self, v, points) -> np.ndarray:
        return self.evaluate(v, points)[0]


# -- quality functionals -------------------------------------------------------

def gd_norm(gd: GradientDiscretisation, v) -> float:
    """``(|grad v|^2 + (int Pi v)^2)^(1/2)`` from the Gram matrices."""
    v = gd._check(v)
    K = gd.grad_gram()
    m = gd.mean_functional()
    val = float(v @ (K @ v)) + float(m @ v) ** 2
    return float(np.sqrt(max(val, 0.0)))


def coercivity_constant(gd: GradientDiscretisation, tol: float = 1e-8,
                        max_iter: int = 10_000, seed: int = 0,
                        inner: SolverConfig = SolverConfig(tol=1e-12)) -> float:
    """Discrete Poincare-Wirtinger constant ``max |Pi v| / |v|_D``.

    Power iteration on ``G^{-1} M`` (``M`` the Pi Gram matrix, ``G`` the norm
    Gram matrix), each step solving with ``G`` by conjugate gradients.
    """
    M = gd.func_gram()
    op, diag = gd.norm_operator()
    if np.any(diag <= 0):
        raise InvariantError("norm Gram matrix is singular (zero diagonal entry)")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(gd.n_dofs)
    lam_old = 0.0
    lam = 0.0
    for _ in range(max_iter):
        y = M @ x
        try:
            x_new, info = pcg(op, y, inner, diag=diag)
        except SolverError as exc:
            raise InvariantError(f"norm Gram matrix is singular: {exc}") from exc
        # Rayleigh quotient of the pencil
        gx = op(x_new)
        lam = float(x_new @ (M @ x_new)) / float(x_new @ gx)
        x = x_new / np.sqrt(float(x_new @ gx))
        if abs(lam - lam_old) <= tol * abs(lam):
            break
        lam_old = lam
    return float(np.sqrt(lam))


def consistency_defect(gd: GradientDiscretisation, phi: Callable, grad_phi: Callable,
                       degree: int = DEFAULT_DEGREE,
                       inner: SolverConfig = SolverConfig(tol=1e-12)) -> float:
    """Least-squares surrogate of ``min_v |Pi v - phi| + |grad v - grad phi|``.

    The sum of squares is minimised and the sum of the two norms at that
    minimiser is reported (an upper bound within a factor ``sqrt 2`` of the
    exact minimum).
    """
    q, P, Gx, Gy = gd.quadrature(degree)
    w = q.weights
    f = np.asarray(phi(q.points), dtype=float) * np.ones(len(q))
    g = np.asarray(grad_phi(q.points), dtype=float)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise ValueError("test function is not finite at the quadrature nodes")
    if not np.any(f) and not np.any(g):
        return 0.0
    W = sp.diags(w)
    A = (P.T @ W @ P + Gx.T @ W @ Gx + Gy.T @ W @ Gy).tocsr()
    rhs = P.T @ (w * f) + Gx.T @ (w * g[:, 0]) + Gy.T @ (w * g[:, 1])
    v, _ = pcg(A, rhs, inner)
    e0 = P @ v - f
    ex = Gx @ v - g[:, 0]
    ey = Gy @ v - g[:, 1]
    return float(np.sqrt(w @ e0 ** 2) + np.sqrt(w @ (ex ** 2 + ey ** 2)))


def conformity_defect(gd: GradientDiscretisation, psi: Callable, div_psi: Callable,
                      degree: int = DEFAULT_DEGREE,
                      inner: SolverConfig = SolverConfig(tol=1e-10)) -> float:
    """``max_v |int grad v . psi + Pi v div psi| / |v|_D = sqrt(b^T G^{-1} b)``."""
    q, P, Gx, Gy = gd.quadrature(degree)
    w = q.weights
    ps = np.asarray(psi(q.points), dtype=float)
    dv = np.asarray(div_psi(q.points), dtype=float) * np.ones(len(q))
    b = Gx.T @ (w * ps[:, 0]) + Gy.T @ (w * ps[:, 1]) + P.T @ (w * dv)
    if not np.any(b):
        return 0.0
    op, diag = gd.norm_operator()
    try:
        x, _ = pcg(op, b, inner, diag=diag)
    except SolverError as exc:
        raise InvariantError(f"norm Gram matrix is singular: {exc}") from exc
    return float(np.sqrt(max(float(b @ x), 0.0)))


def interpolate_initial(gd: GradientDiscretisation, f: Callable) -> np.ndarray:
    return gd.interpolate_initial(f)


def interpolate_smooth(gd: GradientDiscretisation, f: Callable) -> np.ndarray:
    return gd.interpolate_smooth(f)


# -- space-time -----------------------------------------------------------------

@dataclass(frozen=True)
class SpaceTimeGD:
    """A GD together with a strictly increasing time grid."""

    gd: GradientDiscretisation
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or len(t) < 2:
            raise ValueError("need at least two time levels")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time steps must be strictly increasing")
        object.__setattr__(self, "times", t)

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def step_ratio(self) -> float:
        """Measured ``M_t = max dt^{(n+1/2)} / dt^{(n-1/2)}``."""
        dt = self.steps
        return float(np.max(dt[1:] / dt[:-1])) if len(dt) > 1 else 1.0


class SpaceTimeField:
    """One dof vector per time level with the piecewise-constant-in-time
    reconstructions: ``Pi`` takes ``z^(n+1)`` on ``(t^n, t^(n+1)]`` and
    ``Pi~`` takes ``z^(n)`` on ``[t^n, t^(n+1))``."""

    def __init__(self, stgd: SpaceTimeGD, values):
        values = [np.asarray(v, dtype=float) for v in values]
        if len(values) != len(stgd.times):
            raise ValueError("need one dof vector per time level")
        for v in values:
            stgd.gd._check(v)
        self.stgd = stgd
        self.values = values

    def _interval(self, t: float) -> int:
        t_ = self.stgd.times
        if t < t_[0] or t > t_[-1]:
            raise ValueError(f"time {t} outside [{t_[0]}, {t_[-1]}]")
        # interval (t^n, t^(n+1)] containing t
        return int(min(max(np.searchsorted(t_, t, side="left") - 1, 0), len(t_) - 2))

    def pi(self, points, t: float) -> np.ndarray:
        t_ = self.stgd.times
        n = 0 if t == t_[0] else self._interval(t) + 1
        return self.stgd.gd.evaluate_pi(self.values[n], points)

    def pi_left(self, points, t: float) -> np.ndarray:
        t_ = self.stgd.times
        if t >= t_[-1]:
            n = len(t_) - 1
        else:
            n = int(np.searchsorted(t_, t, side="right") - 1)
        return self.stgd.gd.evaluate_pi(self.values[n], points)

    def grad(self, points, t: float) -> np.ndarray:
        t_ = self.stgd.times
        n = 0 if t == t_[0] else self._interval(t) + 1
        return self.stgd.gd.evaluate(self.values[n], points)[1]
