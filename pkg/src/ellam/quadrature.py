"""Quadrature on triangles and on the diamond sub-mesh."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = ["triangle_rule", "gauss_legendre_01", "DiamondQuadrature", "diamond_quadrature"]


def _perm3(a: float, b: float) -> list[tuple[float, float, float]]:
    return [(a, b, b), (b, a, b), (b, b, a)]


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric nodes ``(n, 3)`` and weights summing to one.

    The rule integrates polynomials of total degree ``<= degree`` exactly
    on any triangle (weights are multiplied by the triangle area).
    """
    if degree < 0:
        raise ValueError("degree must be non-negative")
    if degree <= 1:
        bary, w = [(1 / 3, 1 / 3, 1 / 3)], [1.0]
    elif degree == 2:
        bary, w = _perm3(2 / 3, 1 / 6), [1 / 3] * 3
    elif degree <= 4:
        a1, w1 = 0.445948490915965, 0.223381589678011
        a2, w2 = 0.091576213509771, 0.109951743655322
        bary = _perm3(1 - 2 * a1, a1) + _perm3(1 - 2 * a2, a2)
        w = [w1] * 3 + [w2] * 3
    elif degree == 5:
        a1, w1 = 0.470142064105115, 0.132394152788506
        a2, w2 = 0.101286507323456, 0.125939180544827
        bary = [(1 / 3, 1 / 3, 1 / 3)] + _perm3(1 - 2 * a1, a1) + _perm3(1 - 2 * a2, a2)
        w = [0.225] + [w1] * 3 + [w2] * 3
    else:
        # collapsed tensor Gauss-Legendre rule
        n = (degree + 2) // 2 + 1
        x, wx = gauss_legendre_01(n)
        s, t = np.meshgrid(x, x, indexing="ij")
        ws, wt = np.meshgrid(wx, wx, indexing="ij")
        l1 = s.ravel()
        l2 = (t * (1 - s)).ravel()
        ww = 2.0 * (ws * wt * (1 - s)).ravel()
        bary = np.stack([1 - l1 - l2, l1, l2], axis=1)
        return _ro(bary), _ro(ww)
    bary = np.array(bary, dtype=float)
    w = np.array(w, dtype=float)
    w /= w.sum()
    return _ro(bary), _ro(w)


def _ro(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@lru_cache(maxsize=None)
def gauss_legendre_01(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on ``[0, 1]`` (weights sum to one)."""
    x, w = np.polynomial.legendre.leggauss(n)
    return _ro(0.5 * (x + 1.0)), _ro(0.5 * w)


@dataclass(frozen=True)
class DiamondQuadrature:
    """Quadrature nodes over all diamonds of a mesh.

    ``points[q]`` lies in diamond ``hf[q]``; ``weights`` already include the
    diamond area so that ``weights @ f(points)`` approximates the integral
    over the domain.
    """

    points: np.ndarray
    weights: np.ndarray
    hf: np.ndarray
    degree: int

    def __len__(self) -> int:
        return len(self.weights)

    def integrate(self, values: np.ndarray) -> float:
        return float(self.weights @ values)


def diamond_quadrature(mesh, degree: int, hf=None) -> DiamondQuadrature:
    """Tensor of a triangle rule with the diamonds (all or the subset ``hf``)."""
    d = mesh.diamonds
    hf = np.arange(len(d)) if hf is None else np.asarray(hf)
    bary, w = triangle_rule(degree)
    tri = d.triangles[hf]
    pts = np.einsum("qi,tij->tqj", bary, tri).reshape(-1, 2)
    wts = (d.areas[hf][:, None] * w[None, :]).ravel()
    owner = np.repeat(hf, len(w))
    return DiamondQuadrature(points=pts, weights=wts, hf=owner, degree=degree)
