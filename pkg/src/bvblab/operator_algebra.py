"""Homogeneous constant-coefficient differential operators between inner-product
spaces: symbols, adjoints, symbolic action on polynomials, polynomial null
spaces, the first-order reduction, and a catalog of standard operators.

An operator of order k from V (dimension ``dim_v``) to W (dimension ``dim_w``)
is stored as a map from multi-indices of order k to (dim_w x dim_v) real
coefficient matrices.  Codomains that are spaces of symmetric matrices use
orthonormal coordinates (off-diagonal entries scaled by sqrt(2)) so that the
coordinate norm equals the Frobenius norm and singular values of symbols are
basis-independent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import (
    SymIndexSet,
    mi_add,
    mi_falling,
    mi_order,
    mi_power,
    mi_sub,
    multiindex_enumerate,
)

NULLSPACE_RTOL = 1e-9


class StabilizationError(RuntimeError):
    """Polynomial null-space dimension did not stabilize within the degree cap."""


@dataclass(frozen=True)
class DiffOperator:
    """A homogeneous order-k operator ``u -> sum_{|alpha|=k} B_alpha d^alpha u``."""

    n: int
    k: int
    dim_v: int
    dim_w: int
    coeffs: dict[tuple[int, ...], np.ndarray]

    def __post_init__(self):
        clean = {}
        nonzero = False
        for alpha, mat in self.coeffs.items():
            alpha = tuple(int(a) for a in alpha)
            if len(alpha) != self.n or any(a < 0 for a in alpha):
                raise ValueError(f"bad multi-index {alpha}")
            if mi_order(alpha) != self.k:
                raise ValueError(f"coefficient index {alpha} has order != {self.k}")
            mat = np.asarray(mat, dtype=float)
            if mat.shape != (self.dim_w, self.dim_v):
                raise ValueError(
                    f"coefficient for {alpha} has shape {mat.shape}, "
                    f"expected {(self.dim_w, self.dim_v)}"
                )
            nonzero = nonzero or bool(np.any(mat))
            clean[alpha] = mat
        if not nonzero:
            raise ValueError("operator has no nonzero coefficient")
        object.__setattr__(self, "coeffs", clean)

    def coeff(self, alpha: tuple[int, ...]) -> np.ndarray:
        return self.coeffs.get(tuple(alpha), np.zeros((self.dim_w, self.dim_v)))

    def scale(self, lam: float) -> "DiffOperator":
        return DiffOperator(
            self.n, self.k, self.dim_v, self.dim_w,
            {a: lam * m for a, m in self.coeffs.items()},
        )

    def max_coeff_norm(self) -> float:
        return max(np.linalg.norm(m, 2) for m in self.coeffs.values())


@dataclass(frozen=True)
class PolynomialField:
    """A V-valued polynomial stored as monomial coefficients.

    ``coeffs[beta]`` is the V-vector multiplying the monomial ``y**beta``.
    Zero coefficients are dropped on construction.
    """

    n: int
    dim_v: int
    coeffs: dict[tuple[int, ...], np.ndarray]

    def __post_init__(self):
        clean = {}
        for beta, vec in self.coeffs.items():
            beta = tuple(int(b) for b in beta)
            if len(beta) != self.n or any(b < 0 for b in beta):
                raise ValueError(f"bad monomial index {beta}")
            vec = np.atleast_1d(np.asarray(vec, dtype=float))
            if vec.shape != (self.dim_v,):
                raise ValueError(f"coefficient for {beta} has shape {vec.shape}")
            if np.any(vec):
                clean[beta] = vec
        object.__setattr__(self, "coeffs", clean)

    @property
    def degree(self) -> int:
        """Largest monomial order present; -1 for the zero polynomial."""
        return max((mi_order(b) for b in self.coeffs), default=-1)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at an (..., n) array of points; returns (..., dim_v)."""
        points = np.asarray(points, dtype=float)
        out = np.zeros(points.shape[:-1] + (self.dim_v,))
        for beta, vec in self.coeffs.items():
            mono = mi_power(points, beta)
            out += np.multiply.outer(mono, vec) if np.ndim(mono) else mono * vec
        return out

    def add(self, other: "PolynomialField") -> "PolynomialField":
        if (self.n, self.dim_v) != (other.n, other.dim_v):
            raise ValueError("polynomial shapes differ")
        keys = set(self.coeffs) | set(other.coeffs)
        return PolynomialField(
            self.n, self.dim_v,
            {b: self.coeffs.get(b, 0) + other.coeffs.get(b, np.zeros(self.dim_v)) for b in keys},
        )

    def norm(self) -> float:
        """Euclidean norm of the full coefficient vector."""
        if not self.coeffs:
            return 0.0
        return float(np.sqrt(sum(np.sum(v ** 2) for v in self.coeffs.values())))


def symbol(op: DiffOperator, xi: np.ndarray) -> np.ndarray:
    """Principal symbol ``sum_alpha xi**alpha B_alpha`` at a real or complex xi."""
    xi = np.asarray(xi)
    dtype = complex if np.iscomplexobj(xi) else float
    out = np.zeros((op.dim_w, op.dim_v), dtype=dtype)
    for alpha, mat in op.coeffs.items():
        out += mi_power(xi, alpha) * mat
    return out


def adjoint(op: DiffOperator) -> DiffOperator:
    """Formal L2 adjoint: transposed coefficients with global sign (-1)^k."""
    sign = (-1.0) ** op.k
    return DiffOperator(
        op.n, op.k, op.dim_w, op.dim_v,
        {a: sign * m.T for a, m in op.coeffs.items()},
    )


def b_tensor(op: DiffOperator, v: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """The bilinear map ``(v, nu) -> symbol(nu) v`` of a first-order operator."""
    if op.k != 1:
        raise ValueError("b_tensor requires a first-order operator")
    return symbol(op, nu) @ np.atleast_1d(np.asarray(v, dtype=float))


def apply_poly(op: DiffOperator, p: PolynomialField) -> PolynomialField:
    """Exact symbolic application: ``sum_alpha B_alpha d^alpha p``."""
    if op.n != p.n or op.dim_v != p.dim_v:
        raise ValueError("operator and polynomial dimensions differ")
    out: dict[tuple[int, ...], np.ndarray] = {}
    for alpha, mat in op.coeffs.items():
        for beta, vec in p.coeffs.items():
            gamma = mi_sub(beta, alpha)
            if gamma is None:
                continue
            term = mi_falling(beta, alpha) * (mat @ vec)
            if gamma in out:
                out[gamma] = out[gamma] + term
            else:
                out[gamma] = term
    return PolynomialField(op.n, op.dim_w, out)


def grad_power(p: PolynomialField, m: int) -> PolynomialField:
    """The m-th gradient of ``p`` as a field valued in V x SymIndexSet(n, m).

    Component layout is j-major: flat index ``j * K + rank(beta)`` holds
    ``d^beta p_j``, matching the domain layout of :func:`curl_operator` and
    :func:`linearize`.
    """
    idx = SymIndexSet(p.n, m)
    out_dim = p.dim_v * idx.size
    out: dict[tuple[int, ...], np.ndarray] = {}
    for r, beta in enumerate(idx.indices):
        for mono, vec in p.coeffs.items():
            gamma = mi_sub(mono, beta)
            if gamma is None:
                continue
            slot = out.setdefault(gamma, np.zeros(out_dim))
            c = mi_falling(mono, beta)
            for j in range(p.dim_v):
                slot[j * idx.size + r] += c * vec[j]
    return PolynomialField(p.n, out_dim, out)


def poly_nullspace(op: DiffOperator, d: int, rtol: float = NULLSPACE_RTOL) -> list[PolynomialField]:
    """Basis of the space of polynomials of degree <= d annihilated by ``op``.

    Solves ``apply_poly(op, p) = 0`` as a dense linear system on monomial
    coefficients; null vectors below the relative singular-value threshold
    span the result.
    """
    if d < 0:
        raise ValueError("degree cap must be >= 0")
    in_monos = [b for deg in range(d + 1) for b in multiindex_enumerate(op.n, deg)]
    out_monos = [g for deg in range(max(d - op.k, -1) + 1) for g in multiindex_enumerate(op.n, deg)]
    in_pos = {b: i for i, b in enumerate(in_monos)}
    out_pos = {g: i for i, g in enumerate(out_monos)}
    n_in = len(in_monos) * op.dim_v
    n_out = len(out_monos) * op.dim_w
    if n_out == 0:
        # every polynomial of degree < k is annihilated syntactically
        a = np.zeros((1, n_in))
    else:
        a = np.zeros((n_out, n_in))
        for alpha, mat in op.coeffs.items():
            for beta in in_monos:
                gamma = mi_sub(beta, alpha)
                if gamma is None:
                    continue
                c = mi_falling(beta, alpha)
                bi = in_pos[beta] * op.dim_v
                gi = out_pos[gamma] * op.dim_w
                a[gi:gi + op.dim_w, bi:bi + op.dim_v] += c * mat
    _, s, vh = np.linalg.svd(a, full_matrices=True)
    if s.size == 0 or s[0] == 0:
        r = 0
    else:
        r = int(np.sum(s > rtol * s[0]))
    basis = []
    for row in vh[r:]:
        coeffs = {}
        for beta, i in in_pos.items():
            vec = row[i * op.dim_v:(i + 1) * op.dim_v]
            if np.any(np.abs(vec) > 1e-14):
                coeffs[beta] = vec
        basis.append(PolynomialField(op.n, op.dim_v, coeffs))
    return basis


def nullspace_dimensions(op: DiffOperator, d_max: int) -> list[int]:
    """dim of the degree-capped polynomial null space for d = 0 .. d_max."""
    return [len(poly_nullspace(op, d)) for d in range(d_max + 1)]


def ell_bound(op: DiffOperator, d_max: int) -> int:
    """1 + the largest degree occurring in the polynomial null space.

    Stabilization is declared when the capped null-space dimension is equal
    for three consecutive caps (two consecutive no-growth steps).  Raises
    :class:`StabilizationError` otherwise, which signals either a
    non-finite-dimensional null space or a cap chosen too low.
    """
    if d_max < 1:
        raise ValueError("d_max must be >= 1")
    dims = nullspace_dimensions(op, d_max)
    stable_at = None
    for d in range(len(dims) - 2):
        if dims[d] == dims[d + 1] == dims[d + 2]:
            stable_at = d
            break
    if stable_at is None:
        raise StabilizationError(
            f"null-space dimension {dims} did not stabilize by degree {d_max}"
        )
    # the kernel of a homogeneous operator is graded, so dimension increments
    # locate the degrees present
    max_deg = 0
    prev = 0
    for d, dim in enumerate(dims):
        if dim > prev:
            max_deg = d
        prev = dim
    return 1 + max_deg


def curl_operator(n: int, dim_v: int, m: int) -> DiffOperator:
    """First-order compatibility operator on fields valued in V x Sym^m(R^n).

    One codomain row per ``(j, beta, i < l)`` with ``|beta| = m - 1``; the row
    computes ``d_i w[j, beta + e_l] - d_l w[j, beta + e_i]``.  Its symbol
    kernel over C at any nonzero xi is the set of m-th symmetric powers
    ``v (x)^m xi``.  Rows are ordered (j, beta graded-lex, pairs (i, l) lex).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    dom = SymIndexSet(n, m)
    rows_beta = multiindex_enumerate(n, m - 1)
    pairs = [(i, l) for i in range(n) for l in range(i + 1, n)]
    n_rows = dim_v * len(rows_beta) * len(pairs)
    n_cols = dim_v * dom.size
    mats = {tuple(int(i == ax) for i in range(n)): np.zeros((n_rows, n_cols)) for ax in range(n)}
    axes = list(mats.keys())
    row = 0
    for j in range(dim_v):
        for beta in rows_beta:
            for (i, l) in pairs:
                col_il = j * dom.size + dom.rank(mi_add(beta, tuple(int(t == l) for t in range(n))))
                col_li = j * dom.size + dom.rank(mi_add(beta, tuple(int(t == i) for t in range(n))))
                mats[axes[i]][row, col_il] += 1.0
                mats[axes[l]][row, col_li] -= 1.0
                row += 1
    return DiffOperator(n, 1, n_cols, n_rows, mats)


@dataclass(frozen=True)
class LinearizationResult:
    """First-order reduction of an order-k operator.

    ``lifted`` acts on fields valued in V x Sym^{k-1}(R^n); its codomain
    stacks the reduced operator rows (``tilde_rows``) over the compatibility
    rows (``curl_rows``).  ``constants[(i, beta)]`` is the permutation count
    dividing the coefficient placed at axis i, domain slot beta.
    """

    lifted: DiffOperator
    tilde_rows: range
    curl_rows: range
    constants: dict[tuple[int, tuple[int, ...]], int]
    domain_index: SymIndexSet


def linearize(op: DiffOperator) -> LinearizationResult:
    """Reduce an order-k operator to an equi-elliptic first-order one.

    The reduced block has coefficients ``(1/c) * column`` where ``c`` counts
    the axes along which the target multi-index has a nonzero entry; this is
    exactly the normalization that makes the round-trip identity
    ``lifted(grad^{k-1} p) = (op p, 0)`` hold for every polynomial p.  The
    compatibility block is :func:`curl_operator` of order k-1.  For k = 1 the
    lifted operator is the input and the compatibility block is empty.
    """
    n, k = op.n, op.k
    dom = SymIndexSet(n, k - 1)
    if k == 1:
        return LinearizationResult(
            lifted=op,
            tilde_rows=range(op.dim_w),
            curl_rows=range(op.dim_w, op.dim_w),
            constants={},
            domain_index=dom,
        )
    dom_dim = op.dim_v * dom.size
    constants: dict[tuple[int, tuple[int, ...]], int] = {}
    tilde = {ax: np.zeros((op.dim_w, dom_dim)) for ax in range(n)}
    for i in range(n):
        for beta in dom.indices:
            alpha = mi_add(beta, tuple(int(t == i) for t in range(n)))
            c = sum(1 for a in alpha if a >= 1)
            constants[(i, beta)] = c
            mat = op.coeffs.get(alpha)
            if mat is None:
                continue
            for j in range(op.dim_v):
                tilde[i][:, j * dom.size + dom.rank(beta)] += mat[:, j] / c
    curl = curl_operator(n, op.dim_v, k - 1)
    coeffs = {}
    for ax in range(n):
        e_ax = tuple(int(t == ax) for t in range(n))
        coeffs[e_ax] = np.vstack([tilde[ax], curl.coeff(e_ax)])
    lifted = DiffOperator(n, 1, dom_dim, op.dim_w + curl.dim_w, coeffs)
    return LinearizationResult(
        lifted=lifted,
        tilde_rows=range(op.dim_w),
        curl_rows=range(op.dim_w, op.dim_w + curl.dim_w),
        constants=constants,
        domain_index=dom,
    )


def compose(outer: DiffOperator, inner: DiffOperator) -> DiffOperator:
    """The operator ``u -> outer(inner(u))``; orders add."""
    if outer.n != inner.n or outer.dim_v != inner.dim_w:
        raise ValueError("operators do not compose")
    coeffs: dict[tuple[int, ...], np.ndarray] = {}
    for a_out, m_out in outer.coeffs.items():
        for a_in, m_in in inner.coeffs.items():
            gamma = mi_add(a_out, a_in)
            term = m_out @ m_in
            if gamma in coeffs:
                coeffs[gamma] = coeffs[gamma] + term
            else:
                coeffs[gamma] = term
    return DiffOperator(outer.n, outer.k + inner.k, inner.dim_v, outer.dim_w, coeffs)


# --- catalog -----------------------------------------------------------------

CATALOG_NAMES = (
    "gradient",
    "hessian",
    "symmetric_gradient",
    "deviatoric",
    "divergence",
    "cauchy_riemann",
)


def _sym_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i, n)]


def sym_matrix_to_coords(s: np.ndarray) -> np.ndarray:
    """Orthonormal coordinates of a symmetric matrix (off-diagonals x sqrt2)."""
    n = s.shape[0]
    return np.array([s[i, j] * (1.0 if i == j else math.sqrt(2.0)) for i, j in _sym_pairs(n)])


def coords_to_sym_matrix(w: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, n))
    for (i, j), c in zip(_sym_pairs(n), w):
        if i == j:
            out[i, i] = c
        else:
            out[i, j] = out[j, i] = c / math.sqrt(2.0)
    return out


def _e(n: int, i: int) -> tuple[int, ...]:
    return tuple(int(t == i) for t in range(n))


def axis_derivative(n: int, axis: int = 0, dim_v: int = 1) -> DiffOperator:
    """The scalar(ish) operator ``u -> d_axis u``; a standard non-elliptic toy."""
    return DiffOperator(n, 1, dim_v, dim_v, {_e(n, axis): np.eye(dim_v)})


def catalog(name: str, n: int) -> DiffOperator:
    """Standard operators with orthonormal codomain coordinates.

    Symmetric-matrix codomains store off-diagonal entries scaled by sqrt(2),
    so coordinate norms equal Frobenius norms.
    """
    if name == "gradient":
        if n < 1:
            raise ValueError("gradient requires n >= 1")
        return DiffOperator(
            n, 1, 1, n,
            {_e(n, i): np.eye(n)[:, [i]] for i in range(n)},
        )
    if name == "hessian":
        if n < 1:
            raise ValueError("hessian requires n >= 1")
        pairs = _sym_pairs(n)
        dim_w = len(pairs)
        coeffs = {}
        for r, (i, j) in enumerate(pairs):
            alpha = mi_add(_e(n, i), _e(n, j))
            mat = np.zeros((dim_w, 1))
            mat[r, 0] = 1.0 if i == j else math.sqrt(2.0)
            coeffs[alpha] = mat
        return DiffOperator(n, 2, 1, dim_w, coeffs)
    if name == "symmetric_gradient":
        if n < 2:
            raise ValueError("symmetric_gradient requires n >= 2")
        pairs = _sym_pairs(n)
        dim_w = len(pairs)
        coeffs = {}
        for l in range(n):
            mat = np.zeros((dim_w, n))
            for r, (i, j) in enumerate(pairs):
                if i == j:
                    if l == i:
                        mat[r, i] = 1.0
                else:
                    if l == i:
                        mat[r, j] += 1.0 / math.sqrt(2.0)
                    if l == j:
                        mat[r, i] += 1.0 / math.sqrt(2.0)
            coeffs[_e(n, l)] = mat
        return DiffOperator(n, 1, n, dim_w, coeffs)
    if name == "deviatoric":
        if n < 2:
            raise ValueError("deviatoric requires n >= 2")
        e = catalog("symmetric_gradient", n)
        pairs = _sym_pairs(n)
        coeffs = {}
        for l in range(n):
            mat = e.coeff(_e(n, l)).copy()
            for r, (i, j) in enumerate(pairs):
                if i == j:
                    mat[r, l] -= 1.0 / n
            coeffs[_e(n, l)] = mat
        return DiffOperator(n, 1, n, len(pairs), coeffs)
    if name == "divergence":
        if n < 2:
            raise ValueError("divergence requires n >= 2")
        return DiffOperator(
            n, 1, n, 1,
            {_e(n, i): np.eye(n)[[i], :] for i in range(n)},
        )
    if name == "cauchy_riemann":
        if n != 2:
            raise ValueError("cauchy_riemann requires n = 2")
        return DiffOperator(
            2, 1, 2, 2,
            {
                (1, 0): np.array([[1.0, 0.0], [0.0, 1.0]]),
                (0, 1): np.array([[0.0, -1.0], [1.0, 0.0]]),
            },
        )
    raise ValueError(f"unknown catalog operator {name!r}; known: {', '.join(CATALOG_NAMES)}")


# --- serialization -----------------------------------------------------------

def operator_to_document(op: DiffOperator) -> dict:
    """JSON-ready document: {n, k, dimV, dimW, coefficients: [{alpha, matrix}]}."""
    return {
        "n": op.n,
        "k": op.k,
        "dimV": op.dim_v,
        "dimW": op.dim_w,
        "coefficients": [
            {"alpha": list(alpha), "matrix": mat.tolist()}
            for alpha, mat in sorted(op.coeffs.items())
        ],
    }


def operator_from_document(doc: dict) -> DiffOperator:
    for key in ("n", "k", "dimV", "dimW", "coefficients"):
        if key not in doc:
            raise ValueError(f"operator document is missing field {key!r}")
    coeffs = {}
    for entry in doc["coefficients"]:
        if "alpha" not in entry or "matrix" not in entry:
            raise ValueError("coefficient entry needs 'alpha' and 'matrix' fields")
        coeffs[tuple(entry["alpha"])] = np.asarray(entry["matrix"], dtype=float)
    return DiffOperator(
        int(doc["n"]), int(doc["k"]), int(doc["dimV"]), int(doc["dimW"]), coeffs
    )


def save_operator(op: DiffOperator, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(operator_to_document(op), f, indent=2, sort_keys=True)
        f.write("\n")


def load_operator(path: str) -> DiffOperator:
    with open(path, encoding="utf-8") as f:
        return operator_from_document(json.load(f))
