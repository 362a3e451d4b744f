"""Ellipticity, complex ellipticity, and the hyperplane mixing condition.

All randomized procedures take a seed and are deterministic given it.  The
mixing checks are probabilistic evidence, never proofs; reports carry the
sample counts that produced every numeric claim.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import _kernels
from .operator_algebra import (
    DiffOperator,
    StabilizationError,
    ell_bound,
    nullspace_dimensions,
    symbol,
)
from .tensor_core import mi_power, subspace_image, subspace_intersect

ELLIPTIC_DECISION_RTOL = 1e-6
WITNESS_TOL = 1e-8
MIXING_TOL = 1e-6


@dataclass
class EllipticityReport:
    constant: float
    minimizer_xi: np.ndarray
    elliptic: bool
    samples: int
    threshold: float
    refine_steps: int

    def to_dict(self) -> dict:
        return {
            "constant": self.constant,
            "minimizer_xi": self.minimizer_xi.tolist(),
            "elliptic": self.elliptic,
            "samples": self.samples,
            "decision_threshold": self.threshold,
            "refine_steps": self.refine_steps,
        }


@dataclass
class CEllipticityDecision:
    status: str  # PASS | FAIL | INCONCLUSIVE
    nullspace_dims: list[int]
    stabilized: bool
    witness_xi: np.ndarray | None = None
    witness_v: np.ndarray | None = None
    witness_residual: float | None = None
    ell: int | None = None
    restarts: int = 0
    d_max: int = 0

    def to_dict(self) -> dict:
        out = {
            "status": self.status,
            "nullspace_dims": self.nullspace_dims,
            "stabilized": self.stabilized,
            "ell": self.ell,
            "restarts": self.restarts,
            "d_max": self.d_max,
        }
        if self.witness_xi is not None:
            out["witness"] = {
                "xi_re": self.witness_xi.real.tolist(),
                "xi_im": self.witness_xi.imag.tolist(),
                "v_re": self.witness_v.real.tolist(),
                "v_im": self.witness_v.imag.tolist(),
                "residual": self.witness_residual,
            }
        return out


@dataclass
class MixingReport:
    satisfied: str  # passes_samples | falsified | inconclusive
    witness_w: np.ndarray | None = None
    witness_hyperplane: np.ndarray | None = None
    witness_residual: float | None = None
    triple_dims: dict[int, int] = field(default_factory=dict)
    hyperplane_samples: int = 0
    xi_grid: int = 0
    trials: int = 0

    def to_dict(self) -> dict:
        out = {
            "satisfied": self.satisfied,
            "triple_dims": {str(k): v for k, v in sorted(self.triple_dims.items())},
            "hyperplane_samples": self.hyperplane_samples,
            "xi_grid": self.xi_grid,
            "trials": self.trials,
            "note": "sampled evidence only, not a certificate",
        }
        if self.witness_w is not None:
            out["witness"] = {
                "w": self.witness_w.tolist(),
                "hyperplane_normal": self.witness_hyperplane.tolist(),
                "residual": self.witness_residual,
            }
        return out


# --- direction sampling -------------------------------------------------------

def sphere_grid(n: int, resolution: int, hemisphere: bool = True) -> np.ndarray:
    """Deterministic quasi-uniform unit directions with ~``resolution`` points
    per great circle.  For n = 2 an exact angular grid; for n = 3 a Fibonacci
    spiral; for higher n a seeded Gaussian cloud (plus coordinate axes)."""
    if n == 2:
        span = math.pi if hemisphere else 2 * math.pi
        count = max(resolution if hemisphere else 2 * resolution, 4)
        ang = span * np.arange(count) / count
        return np.column_stack([np.cos(ang), np.sin(ang)])
    if n == 3:
        total = max(int(resolution ** 2 / math.pi), 16)
        i = np.arange(total)
        golden = (1 + math.sqrt(5.0)) / 2
        z = (i + 0.5) / total if hemisphere else 2 * (i + 0.5) / total - 1
        rho = np.sqrt(np.maximum(0.0, 1 - z ** 2))
        theta = 2 * math.pi * i / golden
        return np.column_stack([rho * np.cos(theta), rho * np.sin(theta), z])
    rng = np.random.default_rng(1234)
    total = max(int(resolution ** (n - 1) / (2 ** (n - 2))), 2 * n)
    pts = rng.standard_normal((total, n))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    axes = np.eye(n)
    return np.vstack([axes, pts])


def _xi_powers(xis: np.ndarray, alphas: list[tuple[int, ...]]) -> np.ndarray:
    return np.column_stack([mi_power(xis, a) for a in alphas])


def _sigma_min(op: DiffOperator, xi: np.ndarray) -> float:
    """Injectivity modulus of the symbol; zero for wide symbols."""
    m = symbol(op, xi)
    if m.shape[0] < m.shape[1]:
        return 0.0
    s = np.linalg.svd(m, compute_uv=False)
    return float(s[-1]) if s.size else 0.0


def ellipticity_constant(op: DiffOperator, grid_resolution: int = 64,
                         refine_steps: int = 200, seed: int = 0) -> EllipticityReport:
    """Estimate ``min over unit xi of sigma_min(symbol(xi))``.

    Scans a deterministic sphere grid, then refines from the best sample by
    derivative-free descent on the sphere.  The result is an upper bound on
    the true constant; no certified lower bound is claimed.  The elliptic
    flag compares against a threshold relative to the largest coefficient
    norm, separating exact degeneracies from conditioning noise.
    """
    if grid_resolution < 8:
        raise ValueError("grid_resolution must be >= 8 points per great circle")
    xis = sphere_grid(op.n, grid_resolution)
    alphas = list(op.coeffs.keys())
    stack = np.stack([op.coeffs[a] for a in alphas])
    sigmas = _kernels.sigma_min_scan(_xi_powers(xis, alphas), stack)
    best = int(np.argmin(sigmas))
    best_xi, best_val = xis[best], float(sigmas[best])

    if refine_steps > 0:
        def objective(x):
            nrm = np.linalg.norm(x)
            if nrm == 0:
                return np.inf
            return _sigma_min(op, x / nrm)

        res = minimize(objective, best_xi, method="Nelder-Mead",
                       options={"maxiter": refine_steps, "xatol": 1e-12, "fatol": 1e-14})
        if res.fun < best_val:
            best_val = float(res.fun)
            best_xi = res.x / np.linalg.norm(res.x)

    threshold = ELLIPTIC_DECISION_RTOL * op.max_coeff_norm()
    return EllipticityReport(
        constant=best_val,
        minimizer_xi=best_xi,
        elliptic=bool(best_val > threshold),
        samples=len(xis),
        threshold=threshold,
        refine_steps=refine_steps,
    )


# --- complex falsification ----------------------------------------------------

def _smallest_singular_pair(m: np.ndarray) -> tuple[float, np.ndarray]:
    """(residual, v) minimizing |m v| over unit v; handles wide matrices."""
    _, _, vh = np.linalg.svd(m)
    v = vh[-1].conj()
    return float(np.linalg.norm(m @ v)), v


def complex_falsify(op: DiffOperator, restarts: int = 40, iterations: int = 60,
                    seed: int = 0, tol: float = WITNESS_TOL):
    """Multi-start search for (xi, v) on the complex unit spheres with
    ``|symbol(xi) v| < tol``; returns ``(xi, v, residual)`` or None.

    The v-step is exact (smallest right singular vector).  For first-order
    operators the xi-step is exact as well, since with v frozen the residual
    is linear in xi; the two exact steps alternate.  Higher-order operators
    fall back to derivative-free descent of sigma_min over the sphere chart.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    rng = np.random.default_rng(seed)
    n = op.n
    best = None

    def record(xi, v, res):
        nonlocal best
        if best is None or res < best[2]:
            best = (xi, v, res)

    for _ in range(restarts):
        xi = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        xi /= np.linalg.norm(xi)
        if op.k == 1:
            cols = [op.coeff(tuple(int(t == i) for t in range(n))) for i in range(n)]
            for _ in range(iterations):
                res, v = _smallest_singular_pair(symbol(op, xi))
                c = np.column_stack([m @ v for m in cols])
                res2, xi = _smallest_singular_pair(c)
                if res2 < 1e-14:
                    break
            res, v = _smallest_singular_pair(symbol(op, xi))
        else:
            def objective(x):
                z = x[:n] + 1j * x[n:]
                nrm = np.linalg.norm(z)
                if nrm == 0:
                    return np.inf
                s = np.linalg.svd(symbol(op, z / nrm), compute_uv=False)
                return float(s[-1])

            x0 = np.concatenate([xi.real, xi.imag])
            r = minimize(objective, x0, method="Nelder-Mead",
                         options={"maxiter": iterations * 10,
                                  "xatol": 1e-13, "fatol": 1e-15})
            z = r.x[:n] + 1j * r.x[n:]
            xi = z / np.linalg.norm(z)
            res, v = _smallest_singular_pair(symbol(op, xi))
        record(xi, v, res)
        if res < tol:
            break

    if best is not None and best[2] < tol:
        return best
    return None


def is_c_elliptic(op: DiffOperator, d_max: int = 5, restarts: int = 40,
                  seed: int = 0) -> CEllipticityDecision:
    """Two-route decision: finite polynomial null space vs. complex witness.

    PASS when the null-space dimension stabilizes and no witness is found;
    FAIL when it does not stabilize and a witness is found; INCONCLUSIVE
    when the two routes disagree.
    """
    if d_max < 3:
        raise ValueError("d_max must be >= 3")
    dims = nullspace_dimensions(op, d_max)
    try:
        ell = ell_bound(op, d_max)
        stabilized = True
    except StabilizationError:
        ell = None
        stabilized = False
    found = complex_falsify(op, restarts=restarts, seed=seed)
    if stabilized and found is None:
        status = "PASS"
    elif not stabilized and found is not None:
        status = "FAIL"
    else:
        status = "INCONCLUSIVE"
    dec = CEllipticityDecision(
        status=status,
        nullspace_dims=dims,
        stabilized=stabilized,
        ell=ell,
        restarts=restarts,
        d_max=d_max,
    )
    if found is not None:
        dec.witness_xi, dec.witness_v, dec.witness_residual = found
    return dec


# --- mixing -------------------------------------------------------------------

def _random_pairwise_independent_triple(rng, n: int) -> list[np.ndarray]:
    while True:
        xs = rng.standard_normal((3, n))
        xs /= np.linalg.norm(xs, axis=1, keepdims=True)
        ok = all(
            1 - abs(float(xs[i] @ xs[j])) > 1e-6
            for i in range(3) for j in range(i + 1, 3)
        )
        if ok:
            return list(xs)


def mixing_triple_test(op: DiffOperator, trials: int = 100, seed: int = 0) -> MixingReport:
    """Histogram of ``dim(im B(xi) ^ im B(eta) ^ im B(omega))`` over random
    pairwise linearly independent triples."""
    if op.k != 1:
        raise ValueError("mixing tests require a first-order operator")
    rng = np.random.default_rng(seed)
    hist: dict[int, int] = {}
    for _ in range(trials):
        xi, eta, om = _random_pairwise_independent_triple(rng, op.n)
        inter = subspace_intersect(
            subspace_intersect(subspace_image(symbol(op, xi)),
                               subspace_image(symbol(op, eta))),
            subspace_image(symbol(op, om)),
        )
        hist[inter.dim] = hist.get(inter.dim, 0) + 1
    return MixingReport(
        satisfied="falsified" if any(d > 0 for d in hist) else "passes_samples",
        triple_dims=hist,
        trials=trials,
    )


def _hyperplane_directions(normal: np.ndarray, count: int, rng) -> np.ndarray:
    """Unit directions spanning the hyperplane orthogonal to ``normal``."""
    n = len(normal)
    basis = np.linalg.svd(normal[None, :])[2][1:]  # (n-1, n) orthonormal
    if n == 2:
        return basis
    if n == 3:
        ang = math.pi * np.arange(count) / count
        return np.cos(ang)[:, None] * basis[0] + np.sin(ang)[:, None] * basis[1]
    coef = rng.standard_normal((count, n - 1))
    coef /= np.linalg.norm(coef, axis=1, keepdims=True)
    return coef @ basis


def mixing_falsify(op: DiffOperator, hyperplane_samples: int = 50,
                   xi_grid: int = 200, seed: int = 0,
                   tol: float = MIXING_TOL) -> MixingReport:
    """Monte-Carlo search for a nonzero w lying near the union of symbol
    images over every sampled hyperplane.

    A candidate w falsifies the mixing condition (in the sampled sense) when
    for every sampled hyperplane there is a grid direction xi in it with
    ``dist(w, im symbol(xi)) < tol``.  Passing is probabilistic evidence
    only; the report records the sample counts.
    """
    if op.k != 1:
        raise ValueError("mixing tests require a first-order operator")
    if op.n < 2:
        raise ValueError("mixing requires n >= 2")
    rng = np.random.default_rng(seed)

    normals = rng.standard_normal((hyperplane_samples, op.n))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    # projectors onto symbol images, per hyperplane
    projectors: list[np.ndarray] = []
    for p in normals:
        dirs = _hyperplane_directions(p, xi_grid, rng)
        mats = []
        for xi in dirs:
            img = subspace_image(symbol(op, xi))
            if img.dim:
                mats.append(img.basis @ img.basis.T)
            else:
                mats.append(np.zeros((op.dim_w, op.dim_w)))
        projectors.append(np.stack(mats))

    # candidate witnesses: symbol-image vectors plus codomain axes
    candidates = [np.eye(op.dim_w)[i] for i in range(op.dim_w)]
    for _ in range(40):
        xi = rng.standard_normal(op.n)
        xi /= np.linalg.norm(xi)
        v = rng.standard_normal(op.dim_v)
        w = symbol(op, xi) @ v
        nrm = np.linalg.norm(w)
        if nrm > 1e-12:
            candidates.append(w / nrm)

    for w in candidates:
        worst = 0.0
        worst_plane = None
        ok = True
        for p, projs in zip(normals, projectors):
            resid = np.linalg.norm(w[None, :] - np.einsum("gij,j->gi", projs, w), axis=1)
            dmin = float(resid.min())
            if dmin >= tol:
                ok = False
                break
            if dmin > worst:
                worst, worst_plane = dmin, p
        if ok:
            return MixingReport(
                satisfied="falsified",
                witness_w=w,
                witness_hyperplane=worst_plane if worst_plane is not None else normals[0],
                witness_residual=worst,
                hyperplane_samples=hyperplane_samples,
                xi_grid=xi_grid,
            )
    return MixingReport(
        satisfied="passes_samples",
        hyperplane_samples=hyperplane_samples,
        xi_grid=xi_grid,
    )
