"""Multi-index combinatorics, symmetric-tensor coordinates, and subspace algebra.

Conventions used throughout the package:

* A multi-index is a plain tuple of non-negative ints; its order is the sum
  of the entries.
* The coordinate system on the space of symmetric m-linear maps indexes
  components by multi-indices of order m in graded-lexicographic order
  (largest first entry first).  Component ``beta`` of a symmetric power
  ``a (x)^m nu`` stores ``a_j * nu**beta`` directly, with no multinomial
  weights, so that the component of index ``beta`` of the m-th gradient of a
  function is literally ``d^beta u``.
* Subspaces are stored as matrices with orthonormal columns.  Numerical rank
  decisions use a relative singular-value threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

RANK_RTOL = 1e-10


def multiindex_enumerate(n: int, m: int) -> list[tuple[int, ...]]:
    """All multi-indices of order ``m`` in ``n`` variables, graded-lex order.

    The first entry decreases from ``m`` to 0, recursively; e.g. for
    ``n=2, m=2`` the order is ``(2,0), (1,1), (0,2)``.  The list has
    ``C(n+m-1, m)`` elements and the ordering is deterministic.
    """
    if n < 1:
        raise ValueError("dimension n must be >= 1")
    if m < 0:
        raise ValueError("order m must be >= 0")
    if n == 1:
        return [(m,)]
    out: list[tuple[int, ...]] = []
    for first in range(m, -1, -1):
        out.extend((first,) + rest for rest in multiindex_enumerate(n - 1, m - first))
    return out


def mi_order(alpha: tuple[int, ...]) -> int:
    return sum(alpha)


def mi_add(alpha: tuple[int, ...], beta: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(a + b for a, b in zip(alpha, beta))


def mi_sub(alpha: tuple[int, ...], beta: tuple[int, ...]) -> tuple[int, ...] | None:
    """``alpha - beta`` entrywise, or None if any entry would go negative."""
    out = tuple(a - b for a, b in zip(alpha, beta))
    return out if all(e >= 0 for e in out) else None


def mi_factorial(alpha: tuple[int, ...]) -> int:
    return math.prod(math.factorial(a) for a in alpha)


def mi_binom(alpha: tuple[int, ...], beta: tuple[int, ...]) -> int:
    """Product of entrywise binomial coefficients; 0 unless beta <= alpha."""
    if mi_sub(alpha, beta) is None:
        return 0
    return math.prod(math.comb(a, b) for a, b in zip(alpha, beta))


def mi_falling(beta: tuple[int, ...], alpha: tuple[int, ...]) -> int:
    """``beta! / (beta-alpha)!`` -- the coefficient produced by d^alpha y^beta."""
    diff = mi_sub(beta, alpha)
    if diff is None:
        return 0
    return mi_factorial(beta) // mi_factorial(diff)


def mi_power(x: np.ndarray, alpha: tuple[int, ...]) -> np.ndarray | float:
    """Monomial ``x**alpha``; ``x`` may be a vector or an (..., n) array."""
    x = np.asarray(x)
    if x.ndim == 1:
        return math.prod(x[i] ** a for i, a in enumerate(alpha)) if any(alpha) else x.dtype.type(1.0)
    out = np.ones(x.shape[:-1], dtype=x.dtype)
    for i, a in enumerate(alpha):
        if a:
            out = out * x[..., i] ** a
    return out


@dataclass(frozen=True)
class SymIndexSet:
    """Canonically ordered index set for symmetric tensors of order ``m``.

    Houses the coordinates of the space of symmetric m-linear maps on R^n:
    one slot per multi-index of order m, in graded-lex order.
    """

    n: int
    m: int
    indices: tuple[tuple[int, ...], ...] = field(init=False)
    _rank: dict[tuple[int, ...], int] = field(init=False, repr=False)

    def __post_init__(self):
        idx = tuple(multiindex_enumerate(self.n, self.m))
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "_rank", {b: i for i, b in enumerate(idx)})

    @property
    def size(self) -> int:
        return len(self.indices)

    def rank(self, beta: tuple[int, ...]) -> int:
        return self._rank[beta]

    def unrank(self, i: int) -> tuple[int, ...]:
        return self.indices[i]

    def __contains__(self, beta: tuple[int, ...]) -> bool:
        return beta in self._rank


def sym_power(a: np.ndarray, nu: np.ndarray, m: int) -> np.ndarray:
    """Coefficients of ``a (x)^m nu`` over (V x SymIndexSet(n, m)).

    Component ``(j, beta)`` equals ``a[j] * nu**beta`` (monomial convention).
    Returns an array of shape ``(len(a), C(n+m-1, m))``.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    nu = np.asarray(nu, dtype=float)
    if not np.linalg.norm(nu) > 0:
        raise ValueError("direction nu must be nonzero")
    idx = SymIndexSet(len(nu), m)
    pows = np.array([mi_power(nu, b) for b in idx.indices])
    return np.outer(a, pows)


@dataclass(frozen=True)
class Subspace:
    """A linear subspace given by a matrix with orthonormal columns.

    ``basis`` has shape (ambient, dim); dim may be zero.  The scalar field is
    carried by the dtype (float64 or complex128).
    """

    basis: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.basis)
        if b.ndim != 2:
            raise ValueError("basis must be a 2-d array (ambient x dim)")
        if b.shape[1]:
            gram = b.conj().T @ b
            if not np.allclose(gram, np.eye(b.shape[1]), atol=1e-12):
                raise ValueError("basis columns are not orthonormal")
        object.__setattr__(self, "basis", b)

    @property
    def ambient(self) -> int:
        return self.basis.shape[0]

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.basis)

    def project(self, v: np.ndarray) -> np.ndarray:
        """Orthogonal projection of ``v`` onto the subspace."""
        if self.dim == 0:
            return np.zeros_like(np.asarray(v, dtype=self.basis.dtype))
        return self.basis @ (self.basis.conj().T @ v)

    def contains(self, v: np.ndarray, tol: float = 1e-9) -> bool:
        v = np.asarray(v, dtype=complex if self.is_complex else float)
        return float(np.linalg.norm(v - self.project(v))) <= tol * max(1.0, np.linalg.norm(v))

    def complement(self) -> "Subspace":
        """Orthogonal complement within the ambient space."""
        dtype = self.basis.dtype
        if self.dim == 0:
            return Subspace(np.eye(self.ambient, dtype=dtype))
        u, s, _ = np.linalg.svd(self.basis, full_matrices=True)
        return Subspace(np.ascontiguousarray(u[:, self.dim:]))


def subspace_image(m: np.ndarray, rtol: float = RANK_RTOL) -> Subspace:
    """Orthonormal basis of the column space, rank at relative tolerance."""
    m = np.atleast_2d(np.asarray(m))
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    r = int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0
    return Subspace(np.ascontiguousarray(u[:, :r]))


def complex_kernel(m: np.ndarray, rtol: float = RANK_RTOL) -> Subspace:
    """Orthonormal basis of the null space over C (real maps are promoted)."""
    m = np.atleast_2d(np.asarray(m, dtype=complex))
    _, s, vh = np.linalg.svd(m, full_matrices=True)
    cols = m.shape[1]
    if s.size == 0 or s[0] == 0:
        r = 0
    else:
        r = int(np.sum(s > rtol * s[0]))
    return Subspace(np.ascontiguousarray(vh[r:].conj().T))


def subspace_intersect(s1: Subspace, s2: Subspace) -> Subspace:
    """Intersection via orthogonal complements: (S1^c + S2^c)^c."""
    if s1.ambient != s2.ambient:
        raise ValueError("ambient dimensions differ")
    if s1.is_complex != s2.is_complex:
        raise ValueError("scalar fields differ")
    c1, c2 = s1.complement(), s2.complement()
    stacked = np.hstack([c1.basis, c2.basis])
    if stacked.shape[1] == 0:
        return Subspace(np.eye(s1.ambient, dtype=s1.basis.dtype))
    return subspace_image(stacked).complement()


def subspace_distance(s1: Subspace, s2: Subspace) -> float:
    """Spectral-norm distance between the orthogonal projectors."""
    if s1.ambient != s2.ambient:
        raise ValueError("ambient dimensions differ")
    dtype = complex if (s1.is_complex or s2.is_complex) else float
    p1 = np.zeros((s1.ambient,) * 2, dtype=dtype)
    p2 = np.zeros_like(p1)
    if s1.dim:
        b1 = s1.basis.astype(dtype)
        p1 = b1 @ b1.conj().T
    if s2.dim:
        b2 = s2.basis.astype(dtype)
        p2 = b2 @ b2.conj().T
    return float(np.linalg.norm(p1 - p2, 2))
