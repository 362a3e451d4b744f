"""Hot numeric kernels with a numba-compiled path and a pure-numpy fallback.

The numba path is used when numba imports successfully and the environment
variable ``BVB_NUMBA`` is not set to ``0``.  ``BVB_THREADS`` caps the numba
worker count.  Both paths are exercised by the test suite and timed against
each other by ``benchmarks/bench_kernels.py``.

All kernels are deterministic: parallel loops only perform independent
element-wise writes, and reductions run in a fixed order.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

USE_NUMBA = os.environ.get("BVB_NUMBA", "1").lower() not in ("0", "false", "off")

if USE_NUMBA:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # TBB version probe is noisy, harmless
            import numba
            from numba import njit, prange
        threads = os.environ.get("BVB_THREADS")
        if threads:
            numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))
    except ImportError:
        USE_NUMBA = False


# --- numpy implementations ----------------------------------------------------

def sigma_min_scan_numpy(xi_pows: np.ndarray, coeff_stack: np.ndarray) -> np.ndarray:
    """Injectivity modulus ``min_|v|=1 |symbol v|`` per sample direction.

    xi_pows: (samples, n_alphas), coeff_stack: (n_alphas, dim_w, dim_v).
    A wide symbol (dim_w < dim_v) can never be injective, so the modulus is
    identically zero there; otherwise it is the smallest singular value.
    """
    if coeff_stack.shape[1] < coeff_stack.shape[2]:
        return np.zeros(xi_pows.shape[0])
    symbols = np.einsum("sa,awv->swv", xi_pows, coeff_stack)
    return np.linalg.svd(symbols, compute_uv=False)[:, -1]


def riesz_sum_numpy(centers: np.ndarray, mass_norms: np.ndarray, x: np.ndarray,
                    expo: float, skip: int) -> float:
    """``sum_i |x - centers[i]|**(-expo) * mass_norms[i]`` skipping index ``skip``."""
    d = np.linalg.norm(centers - x, axis=1)
    w = mass_norms.copy()
    if skip >= 0:
        w[skip] = 0.0
    nz = w > 0
    return float(np.sum(w[nz] * d[nz] ** (-expo)))


def annulus_sums_numpy(dists: np.ndarray, mass_norms: np.ndarray,
                       radii: np.ndarray, expo: float, outer: float) -> np.ndarray:
    """Per radius r: ``sum over r <= dist < outer of dist**(-expo) * mass``."""
    out = np.empty(len(radii))
    inside = dists < outer
    for i, r in enumerate(radii):
        sel = inside & (dists >= r)
        out[i] = np.sum(mass_norms[sel] * dists[sel] ** (-expo))
    return out


def half_ball_means_numpy(values: np.ndarray, centers: np.ndarray, x: np.ndarray,
                          nus: np.ndarray, r: float):
    """Mean field value over each oriented half of the ball B_r(x).

    values: (cells, dim_v), centers: (cells, n), nus: (dirs, n).
    Returns (mean_plus, mean_minus, count_plus, count_minus) with means of
    shape (dirs, dim_v); empty sides yield zero means.
    """
    rel = centers - x
    in_ball = np.einsum("ci,ci->c", rel, rel) < r * r
    rel_b = rel[in_ball]
    vals_b = values[in_ball]
    proj = rel_b @ nus.T  # (cells_in, dirs)
    pos = (proj > 0).astype(float)
    neg = (proj < 0).astype(float)
    cnt_p = pos.sum(axis=0).astype(np.int64)
    cnt_n = neg.sum(axis=0).astype(np.int64)
    sum_p = np.einsum("cd,cv->dv", pos, vals_b)
    sum_n = np.einsum("cd,cv->dv", neg, vals_b)
    mean_p = sum_p / np.maximum(cnt_p, 1)[:, None]
    mean_n = sum_n / np.maximum(cnt_n, 1)[:, None]
    return mean_p, mean_n, cnt_p, cnt_n


# --- numba implementations ----------------------------------------------------

if USE_NUMBA:

    @njit(cache=True, parallel=True)
    def _sigma_min_scan_nb(xi_pows, coeff_stack):  # pragma: no cover - numba
        samples = xi_pows.shape[0]
        out = np.zeros(samples)
        if coeff_stack.shape[1] < coeff_stack.shape[2]:
            return out
        for s in prange(samples):
            m = np.zeros(coeff_stack.shape[1:])
            for a in range(coeff_stack.shape[0]):
                m += xi_pows[s, a] * coeff_stack[a]
            sv = np.linalg.svd(m)[1]
            out[s] = sv[-1]
        return out

    @njit(cache=True)
    def _riesz_sum_nb(centers, mass_norms, x, expo, skip):  # pragma: no cover
        total = 0.0
        for i in range(centers.shape[0]):
            if i == skip or mass_norms[i] == 0.0:
                continue
            d2 = 0.0
            for j in range(centers.shape[1]):
                t = centers[i, j] - x[j]
                d2 += t * t
            total += mass_norms[i] * d2 ** (-0.5 * expo)
        return total

    @njit(cache=True)
    def _annulus_sums_nb(dists, mass_norms, radii, expo, outer):  # pragma: no cover
        out = np.zeros(len(radii))
        for i in range(dists.shape[0]):
            d = dists[i]
            if d >= outer or mass_norms[i] == 0.0:
                continue
            w = mass_norms[i] * d ** (-expo)
            for k in range(len(radii)):
                if d >= radii[k]:
                    out[k] += w
        return out

    @njit(cache=True)
    def _half_ball_means_nb(values, centers, x, nus, r):  # pragma: no cover
        dirs = nus.shape[0]
        dim_v = values.shape[1]
        n = centers.shape[1]
        sum_p = np.zeros((dirs, dim_v))
        sum_n = np.zeros((dirs, dim_v))
        cnt_p = np.zeros(dirs, dtype=np.int64)
        cnt_n = np.zeros(dirs, dtype=np.int64)
        r2 = r * r
        for c in range(centers.shape[0]):
            d2 = 0.0
            for j in range(n):
                t = centers[c, j] - x[j]
                d2 += t * t
            if d2 >= r2:
                continue
            for d in range(dirs):
                proj = 0.0
                for j in range(n):
                    proj += (centers[c, j] - x[j]) * nus[d, j]
                if proj > 0.0:
                    cnt_p[d] += 1
                    for v in range(dim_v):
                        sum_p[d, v] += values[c, v]
                elif proj < 0.0:
                    cnt_n[d] += 1
                    for v in range(dim_v):
                        sum_n[d, v] += values[c, v]
        for d in range(dirs):
            for v in range(dim_v):
                sum_p[d, v] /= max(cnt_p[d], 1)
                sum_n[d, v] /= max(cnt_n[d], 1)
        return sum_p, sum_n, cnt_p, cnt_n

    def sigma_min_scan(xi_pows, coeff_stack):
        return _sigma_min_scan_nb(np.ascontiguousarray(xi_pows),
                                  np.ascontiguousarray(coeff_stack))

    def riesz_sum(centers, mass_norms, x, expo, skip):
        return float(_riesz_sum_nb(np.ascontiguousarray(centers),
                                   np.ascontiguousarray(mass_norms),
                                   np.ascontiguousarray(x), expo, skip))

    def annulus_sums(dists, mass_norms, radii, expo, outer):
        return _annulus_sums_nb(np.ascontiguousarray(dists),
                                np.ascontiguousarray(mass_norms),
                                np.ascontiguousarray(radii), expo, outer)

    def half_ball_means(values, centers, x, nus, r):
        return _half_ball_means_nb(np.ascontiguousarray(values),
                                   np.ascontiguousarray(centers),
                                   np.ascontiguousarray(x),
                                   np.ascontiguousarray(nus), r)

else:
    sigma_min_scan = sigma_min_scan_numpy
    riesz_sum = riesz_sum_numpy
    annulus_sums = annulus_sums_numpy
    half_ball_means = half_ball_means_numpy


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
